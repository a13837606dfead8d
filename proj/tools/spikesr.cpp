#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "spikesr/train.hpp"

namespace fs = std::filesystem;
using namespace spikesr;

namespace {

std::pair<int, int> parse_hw(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw std::invalid_argument("--hw expects HxW, got " + s);
  const int h = std::stoi(s.substr(0, x)), w = std::stoi(s.substr(x + 1));
  if (h < 1 || w < 1) throw std::invalid_argument("--hw extents must be positive");
  return {h, w};
}

std::unique_ptr<SpikeSR> open_model(const std::string& ckpt, const std::string& variant, std::uint64_t seed) {
  if (!ckpt.empty()) return load_model(ckpt);
  return build_variant(variant, seed);
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, data_root, out, variant, manifest, val_manifest, loss, resume;
  std::uint64_t seed = 0;
  std::int64_t steps = 0, checkpoint_every = 0, val_every = 0, log_every = 0;
  int epochs = 0, batch = 0, patch = 0, time_steps = 0;
  double lr = 0, clip_norm = 0;
  bool clip = false, no_augment = false, deterministic = false;
  std::vector<std::string> sets;
};

void add_train(CLI::App& app, TrainArgs& a, std::function<void()>& action) {
  auto* cmd = app.add_subcommand("train", "Train a model on a directory or manifest of HR PNG images");
  cmd->add_option("--config", a.config, "key=value configuration file (flags override it)");
  cmd->add_option("--data-root", a.data_root, "Directory holding the HR images");
  cmd->add_option("--manifest", a.manifest, "Training manifest (default: every PNG under --data-root)");
  cmd->add_option("--val-manifest", a.val_manifest, "Validation manifest");
  cmd->add_option("--out", a.out, "Output directory for log.csv and checkpoints");
  cmd->add_option("--seed", a.seed, "Master seed");
  cmd->add_option("--variant", a.variant, "s|m|full|baseline|variant_a|variant_b|spikesr|toy")
      ->check(CLI::IsMember({"s", "m", "full", "baseline", "variant_a", "variant_b", "spikesr", "toy"}));
  cmd->add_option("--epochs", a.epochs, "Full passes over the training set");
  cmd->add_option("--steps", a.steps, "Step budget (overrides --epochs)");
  cmd->add_option("--batch", a.batch, "Batch size");
  cmd->add_option("--patch", a.patch, "LR patch side");
  cmd->add_option("--lr", a.lr, "Adam learning rate");
  cmd->add_option("--loss", a.loss, "l1|l2")->check(CLI::IsMember({"l1", "l2"}));
  cmd->add_flag("--clip", a.clip, "Clip gradients at global norm 5");
  cmd->add_option("--clip-norm", a.clip_norm, "Clip gradients at this global norm");
  cmd->add_flag("--no-augment", a.no_augment, "Disable flips and rotations");
  cmd->add_option("--time-steps", a.time_steps, "Spiking time steps T");
  cmd->add_flag("--deterministic", a.deterministic, "Write 64-bit checkpoints for bit-exact resume");
  cmd->add_option("--resume", a.resume, "Checkpoint to resume from");
  cmd->add_option("--checkpoint-every", a.checkpoint_every, "Checkpoint interval in steps");
  cmd->add_option("--val-every", a.val_every, "Validation interval in steps");
  cmd->add_option("--log-every", a.log_every, "Log interval in steps");
  cmd->add_option("--set", a.sets, "Extra key=value settings, e.g. model.channels=32");
  action = [cmd, &a] {
    TrainConfig c = a.config.empty() ? TrainConfig{} : TrainConfig::from_file(a.config);
    auto given = [cmd](const char* flag) { return cmd->count(flag) > 0; };
    if (given("--data-root")) c.data_root = a.data_root;
    if (given("--manifest")) c.manifest = a.manifest;
    if (given("--val-manifest")) c.val_manifest = a.val_manifest;
    if (given("--out")) c.out = a.out;
    if (given("--seed")) c.seed = a.seed;
    if (given("--variant")) c.variant = a.variant;
    if (given("--epochs")) c.epochs = a.epochs;
    if (given("--steps")) c.steps = a.steps;
    if (given("--batch")) c.batch = a.batch;
    if (given("--patch")) c.patch = a.patch;
    if (given("--lr")) c.lr = a.lr;
    if (given("--loss")) c.loss = a.loss;
    if (a.clip) c.clip = 5.0;
    if (given("--clip-norm")) c.clip = a.clip_norm;
    if (a.no_augment) c.augment = false;
    if (given("--time-steps")) c.time_steps = a.time_steps;
    if (a.deterministic) c.deterministic = true;
    if (given("--resume")) c.resume = a.resume;
    if (given("--checkpoint-every")) c.checkpoint_every = a.checkpoint_every;
    if (given("--val-every")) c.val_every = a.val_every;
    if (given("--log-every")) c.log_every = a.log_every;
    for (const auto& kv : a.sets) c.merge_text(kv);
    c.validate();

    const int scale = c.model_config().scale;
    DatasetManifest m;
    if (!c.manifest.empty())
      m = read_manifest(c.manifest, c.data_root);
    else if (!c.data_root.empty())
      m = scan_directory(c.data_root, "train", scale);
    else
      throw std::invalid_argument("train needs --data-root or --manifest");
    auto train = load_images(m, c.patch * scale);
    std::vector<TrainImage> val;
    if (!c.val_manifest.empty()) val = load_images(read_manifest(c.val_manifest, c.data_root));

    fs::create_directories(c.out);
    std::ofstream(fs::path(c.out) / "train_config.txt") << c.to_text();
    Trainer t(c, std::move(train), std::move(val));
    if (!c.resume.empty()) t.resume(c.resume);
    std::cout << "training " << c.variant << " (" << t.model().num_parameters() << " parameters) for "
              << t.total_steps() << " steps\n";
    t.run([&](const LogRow& r) {
      if (r.step % c.log_every == 0 || r.val_psnr >= 0) {
        std::cout << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss;
        if (r.val_psnr >= 0) std::cout << " val_psnr " << r.val_psnr;
        std::cout << std::endl;
      }
    });
    std::cout << "wrote " << (fs::path(c.out) / "last.spsr").string() << "\n";
  };
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, manifest, csv, data_root;
  int time_steps = 0;
  int border = -1;
  bool bicubic = false;
};

void add_eval(CLI::App& app, EvalArgs& a, std::function<void()>& action) {
  auto* cmd = app.add_subcommand("eval", "PSNR/SSIM on Y for the images of a manifest");
  cmd->add_option("--ckpt", a.ckpt, "Model checkpoint");
  cmd->add_option("--manifest", a.manifest, "Manifest of HR images")->required();
  cmd->add_option("--data-root", a.data_root, "Root for the manifest paths");
  cmd->add_option("--csv", a.csv, "CSV output path (default: stdout)");
  cmd->add_option("--time-steps", a.time_steps, "Spiking time steps T at inference");
  cmd->add_flag("--bicubic", a.bicubic, "Score bicubic upsampling instead of a model");
  cmd->add_option("--border", a.border, "Border pixels cropped per side before scoring (default: the scale)");
  action = [&a] {
    if (a.ckpt.empty() && !a.bicubic) throw std::invalid_argument("eval needs --ckpt or --bicubic");
    auto m = read_manifest(a.manifest, a.data_root);
    auto images = load_images(m);
    if (images.empty()) throw DataError("no readable images in " + a.manifest);
    std::vector<ImageMetrics> rows;
    if (a.bicubic) {
      rows = evaluate_bicubic(images, m.scale, a.border);
    } else {
      auto model = load_model(a.ckpt);
      if (model->config().scale != m.scale) throw std::invalid_argument("manifest scale differs from the model scale");
      rows = evaluate(*model, images, a.time_steps, a.border);
    }
    if (a.csv.empty()) {
      write_metrics_csv(std::cout, rows);
    } else {
      std::ofstream out(a.csv);
      if (!out) throw std::runtime_error("cannot write " + a.csv);
      write_metrics_csv(out, rows);
      std::cout << "mean PSNR " << mean_psnr(rows) << " dB over " << rows.size() << " images -> " << a.csv << "\n";
    }
  };
}

// --- sr --------------------------------------------------------------------

struct SrArgs {
  std::string ckpt, in, out, variant = "full";
  std::uint64_t seed = 0;
  int time_steps = 0;
};

void add_sr(CLI::App& app, SrArgs& a, std::function<void()>& action) {
  auto* cmd = app.add_subcommand("sr", "Super-resolve one PNG by the model scale");
  cmd->add_option("--ckpt", a.ckpt, "Model checkpoint");
  cmd->add_option("--variant", a.variant, "Untrained model variant when no checkpoint is given");
  cmd->add_option("--seed", a.seed, "Initialization seed for --variant");
  cmd->add_option("--in", a.in, "Input PNG")->required();
  cmd->add_option("--out", a.out, "Output PNG")->required();
  cmd->add_option("--time-steps", a.time_steps, "Spiking time steps T");
  action = [&a] {
    auto model = open_model(a.ckpt, a.variant, a.seed);
    ImagePlane lr = read_png(a.in);
    ImagePlane sr = super_resolve(*model, lr, a.time_steps);
    write_png(a.out, sr);
    std::cout << lr.width << "x" << lr.height << " -> " << sr.width << "x" << sr.height << " " << a.out << "\n";
  };
}

// --- count -----------------------------------------------------------------

struct CountArgs {
  std::string variant = "full", hw = "160x160";
  int time_steps = 1;
};

void add_count(CLI::App& app, CountArgs& a, std::function<void()>& action) {
  auto* cmd = app.add_subcommand("count", "Parameter and FLOPs accounting");
  cmd->add_option("--variant", a.variant, "Model variant");
  cmd->add_option("--hw", a.hw, "LR input size HxW");
  cmd->add_option("--time-steps", a.time_steps, "Time steps T");
  action = [&a] {
    const auto [h, w] = parse_hw(a.hw);
    if (a.time_steps < 1) throw std::invalid_argument("--time-steps must be >= 1");
    const auto r = count_complexity(preset(a.variant), h, w, a.time_steps);
    std::cout << std::fixed << std::setprecision(2) << "variant " << a.variant << "\n"
              << "params " << r.params << " (" << r.params / 1000.0 << "K)\n"
              << "input " << h << "x" << w << " T=" << a.time_steps << "\n"
              << "macs " << r.macs << "\n"
              << "flops " << r.flops() / 1e9 << "G (1 MAC = 1 FLOP)\n"
              << "flops_2x " << r.flops_2x() / 1e9 << "G (1 MAC = 2 FLOPs)\n";
  };
}

// --- inspect ---------------------------------------------------------------

struct InspectArgs {
  std::string ckpt, variant = "full", clean, degraded, in, out = "inspect";
  std::uint64_t seed = 0;
  int time_steps = 0;
  double probe_scale = 1.0;
};

ImagePlane rate_image(const SpikeRecord& r) {
  ImagePlane img(r.width, r.height, 1);
  img.values = r.map;
  return img;
}

void spikes_report(SpikeSR& model, const ImagePlane& img, int T, double probe_scale, const fs::path& out,
                   const std::string& tag, std::ofstream& csv) {
  std::vector<SpikeRecord> trace;
  RunContext ctx;
  ctx.trace = &trace;
  NoGradGuard ng;
  ImagePlane rgb = img.channels == 3 ? img : ImagePlane(img.width, img.height, 3);
  if (img.channels == 1)
    for (int c = 0; c < 3; ++c) std::copy(img.values.begin(), img.values.end(), rgb.values.begin() + c * img.plane_size());
  model.forward(image_to_tensor(rgb), ctx, T);
  if (trace.empty()) throw std::runtime_error("model has no spiking layers");
  ImagePlane mean_map(trace[0].width, trace[0].height, 1);
  for (const auto& r : trace)
    for (std::size_t i = 0; i < mean_map.values.size(); ++i) mean_map.values[i] += r.map[i] / trace.size();
  write_png((out / (tag + "_first_layer.png")).string(), rate_image(trace[0]));
  write_png((out / (tag + "_mean_rate.png")).string(), mean_map);
  LifParams lif = model.config().lif;
  write_png((out / (tag + "_probe.png")).string(), spike_rate_probe(img, lif, T > 0 ? T : model.config().time_steps, probe_scale));
  double ones = 0, total = 0;
  for (const auto& l : spike_stats(trace)) {
    csv << tag << ',' << l.layer << ',' << l.rate << '\n';
    ones += l.ones;
    total += static_cast<double>(l.total);
  }
  std::cout << tag << ": " << trace.size() << " LIF layers, overall rate " << ones / total << ", first layer "
            << trace[0].rate() << "\n";
}

void add_inspect(CLI::App& app, InspectArgs& a, std::function<void()>& action) {
  auto* cmd = app.add_subcommand("inspect", "Diagnostics: spike activity or DSA patch matches");
  cmd->require_subcommand(1);
  auto common = [&a](CLI::App* c) {
    c->add_option("--ckpt", a.ckpt, "Model checkpoint");
    c->add_option("--variant", a.variant, "Untrained model variant when no checkpoint is given");
    c->add_option("--seed", a.seed, "Initialization seed for --variant");
    c->add_option("--time-steps", a.time_steps, "Spiking time steps T");
    c->add_option("--out", a.out, "Output directory");
  };
  auto* spikes = cmd->add_subcommand("spikes", "Per-layer firing rates and rate maps on a clean/degraded pair");
  common(spikes);
  spikes->add_option("--clean", a.clean, "Clean PNG")->required();
  spikes->add_option("--degraded", a.degraded, "Degraded PNG (default: bicubic x1/4 then x4 of --clean)");
  spikes->add_option("--probe-scale", a.probe_scale, "Input current per unit intensity for the single-neuron probe map");
  spikes->callback([&a, &action] {
    action = [&a] {
      auto model = open_model(a.ckpt, a.variant, a.seed);
      ImagePlane clean = read_png(a.clean);
      ImagePlane degraded;
      if (a.degraded.empty()) {
        const int s = model->config().scale;
        ImagePlane small = degrade(clean, s);
        degraded = bicubic_resize(small, small.width * s, small.height * s);
        clean = mod_crop(clean, s);
      } else {
        degraded = read_png(a.degraded);
      }
      const fs::path out(a.out);
      fs::create_directories(out);
      std::ofstream csv(out / "spike_rates.csv");
      csv << "input,layer,rate\n";
      spikes_report(*model, clean, a.time_steps, a.probe_scale, out, "clean", csv);
      spikes_report(*model, degraded, a.time_steps, a.probe_scale, out, "degraded", csv);
      std::cout << "wrote rate maps and spike_rates.csv to " << out.string() << "\n";
    };
  });
  auto* match = cmd->add_subcommand("match", "Best-match patch indices of every DSA layer");
  common(match);
  match->add_option("--in", a.in, "Input PNG")->required();
  match->callback([&a, &action] {
    action = [&a] {
      auto model = open_model(a.ckpt, a.variant, a.seed);
      ImagePlane img = read_png(a.in);
      if (img.channels != 3) throw DataError("inspect match expects an RGB image");
      std::vector<MatchRecord> matches;
      RunContext ctx;
      ctx.matches = &matches;
      NoGradGuard ng;
      model->forward(image_to_tensor(img), ctx, a.time_steps);
      if (matches.empty()) throw std::runtime_error("model has no DSA layers");
      const fs::path out(a.out);
      fs::create_directories(out);
      std::ofstream csv(out / "matches.csv");
      csv << "layer,frame,patch,match,similarity\n";
      for (const auto& m : matches) {
        const std::int64_t p = static_cast<std::int64_t>(m.grid) * m.grid;
        std::cout << m.layer << " (grid " << m.grid << "):";
        for (std::size_t r = 0; r < m.indices.size(); ++r) {
          const std::int64_t n = static_cast<std::int64_t>(r) / p, i = static_cast<std::int64_t>(r) % p;
          csv << m.layer << ',' << n << ',' << i << ',' << m.indices[r] << ',' << m.similarity.at({n, i, m.indices[r]})
              << '\n';
          if (n == 0) std::cout << ' ' << i << "->" << m.indices[r];
        }
        std::cout << "\n";
      }
      std::cout << "wrote " << (out / "matches.csv").string() << "\n";
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SpikeSR: spiking super-resolution network"};
  app.require_subcommand(1);
  std::function<void()> action;
  TrainArgs train;
  EvalArgs eval;
  SrArgs sr;
  CountArgs count;
  InspectArgs inspect;
  std::function<void()> train_action, eval_action, sr_action, count_action;
  add_train(app, train, train_action);
  add_eval(app, eval, eval_action);
  add_sr(app, sr, sr_action);
  add_count(app, count, count_action);
  add_inspect(app, inspect, action);
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  for (auto* sub : app.get_subcommands()) {
    const std::string name = sub->get_name();
    if (name == "train") action = train_action;
    else if (name == "eval") action = eval_action;
    else if (name == "sr") action = sr_action;
    else if (name == "count") action = count_action;
  }
  try {
    if (!action) throw std::logic_error("no command selected");
    action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
