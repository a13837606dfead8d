#include "spikesr/model.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace spikesr {

namespace {

struct Field {
  const char* key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

int to_int(const std::string& s) {
  std::size_t pos = 0;
  int v = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not an integer: " + s);
  return v;
}

double to_double(const std::string& s) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("not a number: " + s);
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw std::invalid_argument("not a boolean: " + s);
}

#define INT_FIELD(name) \
  Field { #name, [](const ModelConfig& c) { return std::to_string(c.name); }, [](ModelConfig& c, const std::string& v) { c.name = to_int(v); } }
#define BOOL_FIELD(name) \
  Field { #name, [](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, [](ModelConfig& c, const std::string& v) { c.name = to_bool(v); } }
#define STR_FIELD(name) \
  Field { #name, [](const ModelConfig& c) { return c.name; }, [](ModelConfig& c, const std::string& v) { c.name = v; } }
#define DBL_FIELD(key, member) \
  Field { key, [](const ModelConfig& c) { return fmt_double(c.member); }, [](ModelConfig& c, const std::string& v) { c.member = to_double(v); } }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      STR_FIELD(variant),
      INT_FIELD(channels),
      INT_FIELD(ca_embed),
      INT_FIELD(mlp_hidden),
      INT_FIELD(num_sag),
      INT_FIELD(num_sab),
      INT_FIELD(time_steps),
      INT_FIELD(scale),
      INT_FIELD(dsa_grid),
      INT_FIELD(dsa_pool),
      INT_FIELD(attn_window),
      INT_FIELD(scb_kernel),
      BOOL_FIELD(scb_lif_first),
      INT_FIELD(hda_hidden),
      INT_FIELD(hda_kernel),
      INT_FIELD(ta_kernel),
      INT_FIELD(sa_kernel),
      INT_FIELD(ca_reduction),
      STR_FIELD(channel_attn),
      STR_FIELD(spatial_attn),
      BOOL_FIELD(use_dconv),
      BOOL_FIELD(use_pyramid),
      BOOL_FIELD(deform_over_input),
      BOOL_FIELD(cosine_similarity),
      DBL_FIELD("gumbel_tau", gumbel_tau),
      DBL_FIELD("lif_tau", lif.tau),
      DBL_FIELD("lif_v_threshold", lif.v_threshold),
      DBL_FIELD("lif_v_reset", lif.v_reset),
      DBL_FIELD("lif_surrogate_width", lif.surrogate_width),
      DBL_FIELD("tdbn_alpha", tdbn.alpha),
      DBL_FIELD("tdbn_eps", tdbn.eps),
      DBL_FIELD("tdbn_momentum", tdbn.momentum),
      Field{"seed", [](const ModelConfig& c) { return std::to_string(c.seed); },
            [](ModelConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
  };
  return f;
}

#undef INT_FIELD
#undef BOOL_FIELD
#undef STR_FIELD
#undef DBL_FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void ModelConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw std::invalid_argument("unknown model config key: " + key);
}

std::string ModelConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("malformed config line: " + line);
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("invalid model config: ") + what);
  };
  need(channels >= 1 && ca_embed >= 1 && mlp_hidden >= 1, "widths must be positive");
  need(num_sag >= 1 && num_sab >= 1, "m and n must be >= 1");
  need(time_steps >= 1, "T must be >= 1");
  need(scale == 4, "only x4 is supported");
  need(dsa_grid >= 2 && dsa_pool >= 1 && attn_window >= 1, "DSA grid/pool/window");
  need(scb_kernel % 2 == 1 && hda_kernel % 2 == 1 && ta_kernel % 2 == 1 && sa_kernel % 2 == 1, "kernels must be odd");
  need(channel_attn == "hda" || channel_attn == "ta_ca" || channel_attn == "none", "channel_attn");
  need(spatial_attn == "dsa" || spatial_attn == "sa" || spatial_attn == "none", "spatial_attn");
  need(gumbel_tau > 0, "gumbel_tau must be positive");
  lif.validate();
}

BlockConfig ModelConfig::block_config() const {
  BlockConfig b;
  b.channels = channels;
  b.scb_kernel = scb_kernel;
  b.scb_lif_first = scb_lif_first;
  b.lif = lif;
  b.tdbn = tdbn;
  b.hda_hidden = hda_hidden;
  b.hda_kernel = hda_kernel;
  b.ta_kernel = ta_kernel;
  b.sa_kernel = sa_kernel;
  b.ca_reduction = ca_reduction;
  b.channel_attn = channel_attn == "hda" ? ChannelAttn::hda : channel_attn == "ta_ca" ? ChannelAttn::ta_ca : ChannelAttn::none;
  b.spatial_attn = spatial_attn == "dsa" ? SpatialAttn::dsa : spatial_attn == "sa" ? SpatialAttn::sa : SpatialAttn::none;
  b.dsa.channels = channels;
  b.dsa.embed = ca_embed;
  b.dsa.mlp_hidden = mlp_hidden;
  b.dsa.grid = dsa_grid;
  b.dsa.pool = dsa_pool;
  b.dsa.window = attn_window;
  b.dsa.use_dconv = use_dconv;
  b.dsa.use_pyramid = use_pyramid;
  b.dsa.deform_over_input = deform_over_input;
  b.dsa.cosine = cosine_similarity;
  b.dsa.gumbel_tau = gumbel_tau;
  return b;
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.variant = name;
  if (name == "s") {
    c.channels = 40, c.ca_embed = 24, c.mlp_hidden = 72;
  } else if (name == "m") {
    c.channels = 56, c.ca_embed = 24, c.mlp_hidden = 72;
  } else if (name == "full" || name == "spikesr") {
    // defaults
  } else if (name == "baseline") {
    // Widened to roughly the parameter budget of the full model.
    c.channel_attn = "ta_ca", c.spatial_attn = "sa";
    c.num_sag = 8, c.num_sab = 4, c.channels = 54;
  } else if (name == "variant_a") {
    c.channel_attn = "hda", c.spatial_attn = "sa";
    c.num_sag = 10, c.num_sab = 5, c.channels = 43;
  } else if (name == "variant_b") {
    c.channel_attn = "ta_ca", c.spatial_attn = "dsa";
  } else if (name == "toy") {
    c.channels = 16, c.ca_embed = 8, c.mlp_hidden = 32, c.num_sag = 2, c.num_sab = 1, c.time_steps = 2;
  } else {
    throw std::invalid_argument("unknown variant: " + name);
  }
  return c;
}

SpikeSR::SpikeSR(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg.seed);
  const BlockConfig bc = cfg_.block_config();
  shallow = register_module("shallow", std::make_unique<Conv2d>(3, cfg.channels, 3, rng));
  for (int i = 0; i < cfg.num_sag; ++i)
    sags.push_back(register_module("sag" + std::to_string(i), std::make_unique<Sag>(bc, cfg.num_sab, rng)));
  fb = register_module("fb", std::make_unique<FusionBlock>(cfg.ta_kernel, cfg.sa_kernel, rng));
  head = register_module("head", std::make_unique<Conv2d>(cfg.channels, 3 * cfg.scale * cfg.scale, 3, rng));
  tail = register_module("tail", std::make_unique<Conv2d>(3, 3, 3, rng));
  assign_paths("");
}

Tensor SpikeSR::forward(const Tensor& lr, RunContext& ctx, int time_steps) {
  if (lr.rank() != 4 || lr.dim(1) != 3) throw ShapeError("SpikeSR expects RGB (B,3,h,w), got " + shape_str(lr.shape()));
  if (lr.dim(2) < 2 || lr.dim(3) < 2) throw ShapeError("SpikeSR: degenerate input size " + shape_str(lr.shape()));
  const std::int64_t T = time_steps > 0 ? time_steps : cfg_.time_steps;
  const auto B = lr.dim(0), H = lr.dim(2), W = lr.dim(3);
  Tensor f = shallow->forward(lr);
  Tensor x = ops::expand(ops::reshape(f, {1, B, cfg_.channels, H, W}), {T, B, cfg_.channels, H, W});
  for (Sag* g : sags) x = g->forward(x, ctx);
  Tensor y = tail->forward(ops::pixel_shuffle(head->forward(fb->forward(x)), cfg_.scale));
  return ctx.training ? y : ops::clamp(y, 0.0, 1.0);
}

std::uint64_t SpikeSR::macs(std::int64_t h, std::int64_t w, std::int64_t T) const {
  std::uint64_t m = shallow->macs(h, w) + fb->macs(h, w) + head->macs(h, w) + tail->macs(cfg_.scale * h, cfg_.scale * w);
  for (const Sag* g : sags) m += g->macs(h, w, T);
  return m;
}

std::int64_t count_params(const ModelConfig& cfg) {
  SpikeSR model(cfg);
  return model.num_parameters();
}

ComplexityReport count_complexity(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t T) {
  SpikeSR model(cfg);
  return {model.num_parameters(), model.macs(h, w, T)};
}

std::unique_ptr<SpikeSR> build_variant(const std::string& name, std::uint64_t seed) {
  ModelConfig c = preset(name);
  c.seed = seed;
  return std::make_unique<SpikeSR>(c);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'P', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint truncated");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, SpikeSR& model, const CheckpointMeta& meta,
                     const std::vector<std::pair<std::string, Tensor>>& extra, int value_bytes) {
  if (value_bytes != 4 && value_bytes != 8) throw std::invalid_argument("checkpoint value width must be 4 or 8 bytes");
  std::vector<std::pair<std::string, const Tensor*>> all;
  for (auto& p : model.parameters()) all.emplace_back(p.name, p.tensor);
  for (auto& b : model.buffers()) all.emplace_back(b.name, b.tensor);
  for (auto& e : extra) all.emplace_back(e.first, &e.second);

  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(value_bytes));
  put_str(out, model.config().to_text());
  put_u64(out, static_cast<std::uint64_t>(meta.epoch));
  put_u64(out, static_cast<std::uint64_t>(meta.step));
  put_u64(out, meta.seed);
  put_u32(out, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (auto e : t->shape()) put_u64(out, static_cast<std::uint64_t>(e));
    for (double v : t->data()) {
      if (value_bytes == 8)
        put_u64(out, std::bit_cast<std::uint64_t>(v));
      else
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    f.flush();
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) throw std::runtime_error(path + " is not a SPSR checkpoint");
  Reader r{buf, 4};
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t width = r.u32();
  if (width != 4 && width != 8) throw std::runtime_error("bad checkpoint value width");
  Checkpoint ck;
  ck.config = ModelConfig::from_text(r.str());
  ck.meta.epoch = static_cast<std::int64_t>(r.u64());
  ck.meta.step = static_cast<std::int64_t>(r.u64());
  ck.meta.seed = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 5) throw std::runtime_error("checkpoint tensor rank too large");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = width == 8 ? std::bit_cast<double>(r.u64()) : static_cast<double>(std::bit_cast<float>(r.u32()));
    ck.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(v)));
  }
  if (r.pos != buf.size()) throw std::runtime_error("trailing bytes in checkpoint");
  return ck;
}

void load_into(SpikeSR& model, const Checkpoint& ck) {
  auto copy = [&](const NamedTensor& nt) {
    const Tensor* src = ck.find(nt.name);
    if (!src) throw std::runtime_error("checkpoint lacks tensor " + nt.name);
    if (src->shape() != nt.tensor->shape())
      throw std::runtime_error("checkpoint shape mismatch for " + nt.name + ": " + shape_str(src->shape()) + " vs " +
                               shape_str(nt.tensor->shape()));
    std::copy(src->data().begin(), src->data().end(), nt.tensor->mutable_data().begin());
  };
  for (auto& p : model.parameters()) copy(p);
  for (auto& b : model.buffers()) copy(b);
}

std::unique_ptr<SpikeSR> load_model(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<SpikeSR>(ck.config);
  load_into(*model, ck);
  return model;
}

}  // namespace spikesr
