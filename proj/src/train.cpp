#include "spikesr/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace spikesr {

namespace fs = std::filesystem;

Adam::Adam(std::vector<NamedTensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg.lr > 0) || !(cfg.eps > 0) || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
    throw std::invalid_argument("invalid Adam hyperparameters");
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor->numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].tensor;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g[k] * g[k];
      w[k] -= cfg_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

std::vector<std::pair<std::string, Tensor>> Adam::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Shape& s = params_[i].tensor->shape();
    out.emplace_back("adam.m." + params_[i].name, Tensor::from(s, m_[i]));
    out.emplace_back("adam.v." + params_[i].name, Tensor::from(s, v_[i]));
  }
  out.emplace_back("adam.t", Tensor::scalar(static_cast<double>(t_)));
  return out;
}

void Adam::load_state(const Checkpoint& ck) {
  const Tensor* t = ck.find("adam.t");
  if (!t) throw std::runtime_error("checkpoint has no optimizer state");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor* m = ck.find("adam.m." + params_[i].name);
    const Tensor* v = ck.find("adam.v." + params_[i].name);
    if (!m || !v || m->numel() != params_[i].tensor->numel() || v->numel() != params_[i].tensor->numel())
      throw std::runtime_error("optimizer state missing or mismatched for " + params_[i].name);
    m_[i] = m->values();
    v_[i] = v->values();
  }
  t_ = static_cast<std::int64_t>(t->item());
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.tensor->has_grad())
      for (double g : p.tensor->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      if (p.tensor->has_grad())
        for (double& g : p.tensor->mutable_grad()) g *= s;
  }
  return norm;
}

Tensor reconstruction_loss(const Tensor& sr, const Tensor& hr, LossKind kind) {
  if (sr.shape() != hr.shape()) throw ShapeError("loss: " + shape_str(sr.shape()) + " vs " + shape_str(hr.shape()));
  Tensor d = ops::sub(sr, hr);
  return ops::mean(kind == LossKind::l1 ? ops::abs(d) : ops::square(d));
}

// ---------------------------------------------------------------------------
// TrainConfig

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("bad boolean for " + key + ": " + v);
}

template <class T>
T parse_num(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !is.eof()) throw std::invalid_argument("bad value for " + key + ": " + v);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& v) {
  if (key.rfind("model.", 0) == 0) {
    ModelConfig probe;
    probe.set(key.substr(6), v);  // rejects unknown model keys early
    model[key.substr(6)] = v;
  } else if (key == "variant") variant = v;
  else if (key == "data_root") data_root = v;
  else if (key == "manifest") manifest = v;
  else if (key == "val_manifest") val_manifest = v;
  else if (key == "out") out = v;
  else if (key == "seed") seed = parse_num<std::uint64_t>(key, v);
  else if (key == "epochs") epochs = parse_num<int>(key, v);
  else if (key == "steps") steps = parse_num<std::int64_t>(key, v);
  else if (key == "batch") batch = parse_num<int>(key, v);
  else if (key == "patch") patch = parse_num<int>(key, v);
  else if (key == "lr") lr = parse_num<double>(key, v);
  else if (key == "loss") loss = v;
  else if (key == "clip") clip = parse_num<double>(key, v);
  else if (key == "augment") augment = parse_bool(key, v);
  else if (key == "checkpoint_every") checkpoint_every = parse_num<std::int64_t>(key, v);
  else if (key == "val_every") val_every = parse_num<std::int64_t>(key, v);
  else if (key == "log_every") log_every = parse_num<std::int64_t>(key, v);
  else if (key == "time_steps") time_steps = parse_num<int>(key, v);
  else if (key == "deterministic") deterministic = parse_bool(key, v);
  else if (key == "resume") resume = v;
  else throw std::invalid_argument("unknown training key: " + key);
}

void TrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (patch < 1) throw std::invalid_argument("patch must be >= 1");
  if (epochs < 1 && steps <= 0) throw std::invalid_argument("epochs or steps must be positive");
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (clip < 0) throw std::invalid_argument("clip must be >= 0");
  if (checkpoint_every < 0 || val_every < 0 || log_every < 1) throw std::invalid_argument("bad logging interval");
  loss_kind();
  model_config().validate();
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << std::setprecision(17) << "variant=" << variant << "\ndata_root=" << data_root << "\nmanifest=" << manifest
     << "\nval_manifest=" << val_manifest << "\nout=" << out << "\nseed=" << seed << "\nepochs=" << epochs
     << "\nsteps=" << steps << "\nbatch=" << batch << "\npatch=" << patch << "\nlr=" << lr << "\nloss=" << loss
     << "\nclip=" << clip << "\naugment=" << (augment ? "true" : "false") << "\ncheckpoint_every=" << checkpoint_every
     << "\nval_every=" << val_every << "\nlog_every=" << log_every << "\ntime_steps=" << time_steps
     << "\ndeterministic=" << (deterministic ? "true" : "false") << "\nresume=" << resume << "\n";
  for (const auto& [k, v] : model) os << "model." << k << "=" << v << "\n";
  return os.str();
}

void TrainConfig::merge_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(n) + ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c;
  c.merge_text(ss.str());
  return c;
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m = preset(variant);
  for (const auto& [k, v] : model) m.set(k, v);
  if (time_steps > 0) m.time_steps = time_steps;
  m.seed = seed;
  return m;
}

LossKind TrainConfig::loss_kind() const {
  if (loss == "l1") return LossKind::l1;
  if (loss == "l2") return LossKind::l2;
  throw std::invalid_argument("loss must be l1 or l2, got " + loss);
}

// ---------------------------------------------------------------------------
// Evaluation

ImagePlane super_resolve(SpikeSR& model, const ImagePlane& lr, int time_steps) {
  ImagePlane rgb = lr;
  if (lr.channels == 1) {
    rgb = ImagePlane(lr.width, lr.height, 3);
    for (int c = 0; c < 3; ++c) std::copy(lr.values.begin(), lr.values.end(), rgb.values.begin() + c * lr.plane_size());
  }
  NoGradGuard ng;
  RunContext ctx;
  ImagePlane out = tensor_to_image(model.forward(image_to_tensor(rgb), ctx, time_steps));
  return lr.channels == 1 ? rgb_to_y(out) : out;
}

std::vector<ImageMetrics> evaluate(SpikeSR& model, const std::vector<TrainImage>& images, int time_steps, int border) {
  if (border < 0) border = model.config().scale;
  std::vector<ImageMetrics> rows;
  for (const auto& img : images) {
    ImagePlane sr = super_resolve(model, img.lr, time_steps);
    rows.push_back({img.path, psnr(sr, img.hr, border), ssim(sr, img.hr, border)});
  }
  return rows;
}

std::vector<ImageMetrics> evaluate_bicubic(const std::vector<TrainImage>& images, int scale, int border) {
  if (border < 0) border = scale;
  std::vector<ImageMetrics> rows;
  for (const auto& img : images) {
    ImagePlane up = bicubic_resize(img.lr, img.hr.width, img.hr.height);
    rows.push_back({img.path, psnr(up, img.hr, border), ssim(up, img.hr, border)});
  }
  return rows;
}

double mean_psnr(const std::vector<ImageMetrics>& rows) {
  double s = 0;
  for (const auto& r : rows) s += r.psnr;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig cfg, std::vector<TrainImage> train, std::vector<TrainImage> val)
    : cfg_(std::move(cfg)), train_(std::move(train)), val_(std::move(val)) {
  cfg_.validate();
  if (train_.empty()) throw DataError("no usable training images");
  const ModelConfig mc = cfg_.model_config();
  model_ = std::make_unique<SpikeSR>(mc);
  adam_ = std::make_unique<Adam>(model_->parameters(), AdamConfig{cfg_.lr});
  spec_ = {cfg_.batch, cfg_.patch, mc.scale, cfg_.augment, cfg_.seed};
}

std::int64_t Trainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(train_.size());
  return (n + cfg_.batch - 1) / cfg_.batch;
}

std::int64_t Trainer::total_steps() const {
  return cfg_.steps > 0 ? cfg_.steps : static_cast<std::int64_t>(cfg_.epochs) * steps_per_epoch();
}

void Trainer::resume(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.config.to_text() != model_->config().to_text()) {
    model_ = std::make_unique<SpikeSR>(ck.config);
    adam_ = std::make_unique<Adam>(model_->parameters(), AdamConfig{cfg_.lr});
  }
  load_into(*model_, ck);
  adam_->load_state(ck);
  step_ = ck.meta.step;
}

double Trainer::step_on(const Batch& b) {
  RunContext ctx = RunContext::train(mix_seed(cfg_.seed ^ 0x5eed5eed5eed5eedULL, static_cast<std::uint64_t>(step_)));
  Tensor sr = model_->forward(b.lr, ctx);
  Tensor loss = reconstruction_loss(sr, b.hr, cfg_.loss_kind());
  const double l = loss.item();
  if (!std::isfinite(l))
    throw NonFiniteError("non-finite loss " + std::to_string(l) + " at step " + std::to_string(step_));
  adam_->zero_grad();
  backward(loss);
  if (cfg_.clip > 0) clip_grad_norm(model_->parameters(), cfg_.clip);
  adam_->step();
  ++step_;
  return l;
}

double Trainer::step() { return step_on(make_batch(train_, spec_, step_)); }

void Trainer::save(const std::string& path) const {
  CheckpointMeta meta{step_ / steps_per_epoch(), step_, cfg_.seed};
  save_checkpoint(path, *model_, meta, adam_->state(), cfg_.deterministic ? 8 : 4);
}

void Trainer::run(const std::function<void(const LogRow&)>& on_row) {
  fs::create_directories(cfg_.out);
  const fs::path log_path = fs::path(cfg_.out) / "log.csv";
  const bool fresh = step_ == 0 || !fs::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (fresh) log << "step,epoch,loss,val_psnr\n";
  log << std::setprecision(10);

  const std::int64_t total = total_steps();
  BatchLoader loader(train_, spec_, step_, std::min(2, worker_count()), 4);
  while (step_ < total) {
    const Batch b = loader.next();
    LogRow row;
    row.loss = step_on(b);
    row.step = step_;
    row.epoch = (step_ - 1) / steps_per_epoch();
    if (!val_.empty() && cfg_.val_every > 0 && (step_ % cfg_.val_every == 0 || step_ == total))
      row.val_psnr = mean_psnr(evaluate(*model_, val_));
    if (on_row) on_row(row);
    if (step_ % cfg_.log_every == 0 || step_ == total || row.val_psnr >= 0) {
      log << row.step << ',' << row.epoch << ',' << row.loss << ',';
      if (row.val_psnr >= 0) log << row.val_psnr;
      log << '\n' << std::flush;
    }
    if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
      std::ostringstream name;
      name << "ckpt_" << std::setw(8) << std::setfill('0') << step_ << ".spsr";
      save((fs::path(cfg_.out) / name.str()).string());
    }
  }
  save((fs::path(cfg_.out) / "last.spsr").string());
}

}  // namespace spikesr
