// Command-line driver: make-dataset, train, compile, sample, profile, analyze.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dydit/dydit.hpp"

namespace fs = std::filesystem;
using namespace dydit;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "key=value configuration file");
  cmd->add_option("--set", a.sets, "override, e.g. --set train.lambda=0.7")->allow_extra_args(false);
  cmd->add_option("--seed", a.seed, "overrides the 'seed' key");
  cmd->add_option("--out", a.out, "primary output path");
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc.load_file(a.config);
  for (const auto& s : a.sets) rc.apply_override(s);
  if (a.seed) rc.set("seed", std::to_string(*a.seed), "--seed");
  return rc;
}

const std::string& required_out(const CommonArgs& a, const char* what) {
  require(!a.out.empty(), "missing --out (", what, ")");
  return a.out;
}

std::uint64_t seed_of(const RunConfig& rc) { return static_cast<std::uint64_t>(rc.integer("seed")); }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot write '", path, "'");
  return out;
}

Checkpoint load_for(const RunConfig& rc, const std::string& key) {
  const auto cfg = rc.model();
  return load_checkpoint(rc.required_path(key), &cfg);
}

DatasetContainer load_data(const RunConfig& rc) {
  auto ds = load_dataset(rc.required_path("paths.dataset"));
  ds.check_compatible(rc.model());
  return ds;
}

std::vector<int> image_range(const RunConfig& rc, const DatasetContainer& ds) {
  const auto first = rc.integer("analyze.first_image");
  const auto n = rc.integer("analyze.images");
  require(first >= 0 && n >= 1 && first + n <= ds.count, "analyze.first_image/analyze.images select [", first, ", ",
          first + n, ") outside a dataset of ", ds.count, " images");
  std::vector<int> idx;
  for (auto i = first; i < first + n; ++i) idx.push_back(static_cast<int>(i));
  return idx;
}

SampleRouting parse_routing(const std::string& s) {
  if (s == "compiled") return SampleRouting::kCompiled;
  if (s == "on-the-fly") return SampleRouting::kOnTheFly;
  if (s == "static") return SampleRouting::kStatic;
  fail("sampler.routing must be compiled, on-the-fly or static, got '", s, "'");
}

std::optional<ArchitectureSchedule> schedule_for(const RunConfig& rc, const DitModel<float>& model,
                                                 SampleRouting routing) {
  if (routing != SampleRouting::kCompiled) return std::nullopt;
  return deserialize_schedule(rc.required_path("paths.schedule"), model.config.heads, model_fingerprint(model));
}

// --- commands ------------------------------------------------------------------

int cmd_make_dataset(const RunConfig& rc, const CommonArgs& a) {
  const auto cfg = rc.model();
  const auto syn = make_synthetic(static_cast<int>(rc.integer("dataset.count")), cfg.classes, cfg.extent,
                                  cfg.channels_in, static_cast<std::uint64_t>(rc.integer("dataset.seed")));
  save_dataset(syn.data, required_out(a, "dataset file"));
  std::cout << "wrote " << syn.data.count << " images (" << cfg.classes << " classes, " << cfg.extent << "x"
            << cfg.extent << "x" << cfg.channels_in << ") to " << a.out << '\n';
  return 0;
}

int cmd_train(const RunConfig& rc, const CommonArgs& a) {
  const auto cfg = rc.model();
  const auto diff = rc.diffusion();
  const auto tc = rc.train();
  const auto data = load_data(rc);
  const auto& out = required_out(a, "checkpoint file");

  DitModel<float> model;
  TrainState state;
  if (!rc.str("train.resume").empty()) {
    auto ck = load_for(rc, "train.resume");
    require(ck.model.diffusion == diff, "train.resume: diffusion settings differ from the configuration");
    model = std::move(ck.model);
    state = std::move(ck.state);
    model.set_requires_grad(true);
  } else {
    if (!rc.str("train.init").empty()) {
      auto ck = load_for(rc, "train.init");
      require(ck.model.diffusion == diff, "train.init: diffusion settings differ from the configuration");
      model = std::move(ck.model);
      model.set_requires_grad(true);
    } else {
      model = init_model<float>(cfg, diff, seed_of(rc));
    }
    if (rc.boolean("train.dynamic")) begin_dynamic(model);
  }

  const std::string log_path = rc.str("paths.log").empty() ? out + ".log" : rc.str("paths.log");
  auto log = open_out(log_path);
  write_log_header(log);
  TrainHooks hooks;
  hooks.log = &log;
  hooks.diagnostics = &std::cerr;
  train(model, state, tc, data, hooks);
  save_checkpoint(model, state, out);
  std::cout << "steps " << state.step << "  L_DiT(ema) " << state.ema_loss << "  ratio(ema) " << state.ema_ratio
            << (model.dynamic ? "" : "  (static)") << "\ncheckpoint " << out << "\nlog " << log_path << '\n';
  return 0;
}

int cmd_compile(const RunConfig& rc, const CommonArgs& a) {
  const auto ck = load_for(rc, "paths.checkpoint");
  const auto spec = rc.sampler();
  const auto timesteps = sampler_timesteps(ck.model.diffusion.T, spec.steps);
  const auto schedule = compile_schedule(ck.model, timesteps);
  serialize_schedule(schedule, required_out(a, "schedule file"));
  std::cout << "timestep\tlayer\tactive_heads\tactive_groups\n";
  for (const auto& r : activation_map(schedule))
    std::cout << r.timestep << '\t' << r.layer << '\t' << r.heads << '\t' << r.groups << '\n';
  std::cerr << "wrote " << timesteps.size() << "-step schedule to " << a.out << '\n';
  return 0;
}

int cmd_sample(const RunConfig& rc, const CommonArgs& a) {
  const auto ck = load_for(rc, "paths.checkpoint");
  const auto& model = ck.model;
  const auto& cfg = model.config;
  const auto spec = rc.sampler();
  const auto routing = parse_routing(rc.str("sampler.routing"));
  const auto schedule = schedule_for(rc, model, routing);
  std::optional<SliceCache<float>> cache;
  if (schedule) cache.emplace(model, *schedule);

  const int count = static_cast<int>(rc.integer("sampler.count"));
  const int batch = static_cast<int>(rc.integer("sampler.batch"));
  require(count >= 1 && batch >= 1, "sampler.count and sampler.batch must be >= 1");
  auto labels = rc.int_list("sampler.labels");
  if (labels.empty())
    for (int i = 0; i < count; ++i) labels.push_back(i % cfg.classes);
  require(static_cast<int>(labels.size()) == count, "sampler.labels has ", labels.size(), " entries for ", count,
          " images");
  for (auto y : labels) require(y >= 0 && y < cfg.classes, "sampler label ", y, " outside [0, ", cfg.classes, ")");

  const auto& dir = required_out(a, "output directory");
  fs::create_directories(dir);
  FlopsReport report;
  double seconds = 0;
  for (int start = 0; start < count; start += batch) {
    SampleRequest rq;
    rq.batch_size = std::min(batch, count - start);
    for (int i = 0; i < rq.batch_size; ++i) rq.labels.push_back(static_cast<int>(labels[static_cast<std::size_t>(start + i)]));
    rq.guidance = rc.real("sampler.guidance");
    rq.seed = derive_seed(seed_of(rc), static_cast<std::uint64_t>(start), 0x5a3b);
    auto r = batched_sample(model, schedule ? &*schedule : nullptr, spec, rq, routing, cache ? &*cache : nullptr);
    seconds += r.seconds;
    report.entries.insert(report.entries.end(), r.report.entries.begin(), r.report.entries.end());
    const std::size_t per = static_cast<std::size_t>(cfg.channels_in * cfg.extent * cfg.extent);
    for (int i = 0; i < rq.batch_size; ++i) {
      std::ostringstream name;
      name << "sample_" << std::setw(4) << std::setfill('0') << start + i << (cfg.channels_in == 3 ? ".ppm" : ".pgm");
      io::write_pnm((fs::path(dir) / name.str()).string(),
                    r.images.data().subspan(static_cast<std::size_t>(i) * per, per), cfg.channels_in, cfg.extent);
    }
  }
  {
    auto f = open_out((fs::path(dir) / "flops.tsv").string());
    report.write_table(f);
  }
  std::ostringstream summary;
  summary << "images\tseconds\timages_per_s\tmean_flops_ratio\n"
          << count << '\t' << seconds << '\t' << (seconds > 0 ? count / seconds : 0.0) << '\t' << report.ratio()
          << '\n';
  auto f = open_out((fs::path(dir) / "summary.tsv").string());
  f << summary.str();
  std::cout << summary.str();
  return 0;
}

int cmd_profile(const RunConfig& rc, const CommonArgs& a) {
  const auto ck = load_for(rc, "paths.checkpoint");
  const auto& model = ck.model;
  const auto spec = rc.sampler();
  const auto schedule = schedule_for(rc, model, SampleRouting::kCompiled);
  const int runs = static_cast<int>(rc.integer("profile.runs"));
  require(runs >= 1, "profile.runs must be >= 1");
  auto sizes = rc.int_list("profile.batch_sizes");
  require(!sizes.empty(), "profile.batch_sizes is empty");

  std::ostringstream table;
  table << "batch\tstatic[s]\tdynamic[s]\tspeedup\tflops_ratio\n";
  for (auto b : sizes) {
    require(b >= 1, "profile.batch_sizes entries must be >= 1");
    SampleRequest rq;
    rq.batch_size = static_cast<int>(b);
    for (int i = 0; i < rq.batch_size; ++i) rq.labels.push_back(i % model.config.classes);
    rq.seed = seed_of(rc);
    const double t_static = median_seconds(model, nullptr, spec, rq, SampleRouting::kStatic, runs);
    const double t_dynamic = median_seconds(model, &*schedule, spec, rq, SampleRouting::kCompiled, runs);
    const auto ratio = batched_sample(model, &*schedule, spec, rq, SampleRouting::kCompiled).report.ratio();
    table << b << '\t' << t_static << '\t' << t_dynamic << '\t' << t_static / t_dynamic << '\t' << ratio << '\n';
  }
  if (!a.out.empty()) {
    auto f = open_out(a.out);
    f << table.str();
  }
  std::cout << table.str();
  return 0;
}

int cmd_analyze(const RunConfig& rc, const CommonArgs& a) {
  const auto mode = rc.str("analyze.mode");
  const auto& out_path = required_out(a, "data file");
  std::ostringstream out;
  if (mode == "loss-map") {
    const auto ck = load_for(rc, "paths.checkpoint");
    const auto data = load_data(rc);
    const auto& cfg = ck.model.config;
    const int t = static_cast<int>(rc.integer("analyze.t"));
    out << "image\ttoken\trow\tcol\tloss[mse]\tnormalized\n";
    for (int i : image_range(rc, data)) {
      const auto m = loss_map(ck.model, data.images<float>({i}), data.labels[static_cast<std::size_t>(i)], t,
                              analysis_noise<float>(cfg, seed_of(rc), i, t));
      for (int k = 0; k < cfg.tokens(); ++k)
        out << i << '\t' << k << '\t' << k / cfg.grid() << '\t' << k % cfg.grid() << '\t'
            << m.raw[static_cast<std::size_t>(k)] << '\t' << m.normalized[static_cast<std::size_t>(k)] << '\n';
    }
  } else if (mode == "loss-gap") {
    require(!rc.str("paths.checkpoint_small").empty(), "loss-gap needs two checkpoints: set paths.checkpoint_small");
    const auto large = load_checkpoint(rc.required_path("paths.checkpoint"));
    const auto small = load_checkpoint(rc.required_path("paths.checkpoint_small"));
    const auto data = load_data(rc);
    const auto grid = timestep_grid(large.model.diffusion.T, static_cast<int>(rc.integer("analyze.grid_points")));
    out << "t\tloss_small[mse]\tloss_large[mse]\tgap[mse]\n";
    for (const auto& p : loss_gap_curve(small.model, large.model, data, image_range(rc, data), grid, seed_of(rc)))
      out << p.t << '\t' << p.small << '\t' << p.large << '\t' << p.gap() << '\n';
  } else if (mode == "activation-map") {
    const auto ck = load_for(rc, "paths.checkpoint");
    ArchitectureSchedule s;
    if (!rc.str("paths.schedule").empty()) {
      s = deserialize_schedule(rc.str("paths.schedule"), ck.model.config.heads, model_fingerprint(ck.model));
    } else {
      s = compile_schedule(ck.model, sampler_timesteps(ck.model.diffusion.T, rc.sampler().steps));
    }
    out << "timestep\tlayer\tactive_heads\tactive_groups\n";
    for (const auto& r : activation_map(s)) out << r.timestep << '\t' << r.layer << '\t' << r.heads << '\t' << r.groups << '\n';
  } else if (mode == "token-flops-map") {
    const auto ck = load_for(rc, "paths.checkpoint");
    const auto data = load_data(rc);
    const auto& cfg = ck.model.config;
    const auto idx = image_range(rc, data);
    const auto maps = token_flops_map(ck.model, data, idx, sampler_timesteps(ck.model.diffusion.T, rc.sampler().steps),
                                      seed_of(rc));
    out << "image\ttoken\trow\tcol\tflops[MAC]\tnormalized\n";
    for (std::size_t j = 0; j < idx.size(); ++j)
      for (int k = 0; k < cfg.tokens(); ++k)
        out << idx[j] << '\t' << k << '\t' << k / cfg.grid() << '\t' << k % cfg.grid() << '\t'
            << maps[j].raw[static_cast<std::size_t>(k)] << '\t' << maps[j].normalized[static_cast<std::size_t>(k)]
            << '\n';
  } else {
    fail("analyze.mode must be loss-map, loss-gap, activation-map or token-flops-map, got '", mode, "'");
  }
  auto f = open_out(out_path);
  f << out.str();
  std::cerr << "wrote " << mode << " data to " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic diffusion transformer toolkit"};
  app.require_subcommand(1);
  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&, const CommonArgs&);
  };
  const Command commands[] = {
      {"make-dataset", "write the synthetic shapes dataset", cmd_make_dataset},
      {"train", "train or fine-tune a model", cmd_train},
      {"compile", "precompute per-timestep width masks", cmd_compile},
      {"sample", "generate images", cmd_sample},
      {"profile", "static vs dynamic sampling latency", cmd_profile},
      {"analyze", "export loss/activation/FLOPs maps", cmd_analyze},
  };
  std::vector<CommonArgs> args(std::size(commands));
  for (std::size_t i = 0; i < std::size(commands); ++i) add_common(app.add_subcommand(commands[i].name, commands[i].help), args[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  for (std::size_t i = 0; i < std::size(commands); ++i) {
    if (!app.got_subcommand(commands[i].name)) continue;
    try {
      return commands[i].run(resolve(args[i]), args[i]);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
