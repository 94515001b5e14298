#include "vsur/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "vsur/errors.hpp"
#include "vsur/evaluation.hpp"
#include "vsur/model.hpp"
#include "vsur/sensitivity.hpp"
#include "vsur/service.hpp"
#include "vsur/synthetic_ensemble.hpp"
#include "vsur/training.hpp"

namespace fs = std::filesystem;

namespace vsur {

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

/// `--params` accepts inline JSON or a path to a JSON file.
ParameterSetting read_setting(const std::string& text, const ParameterSpec& spec) {
  nlohmann::json j;
  const auto first = text.find_first_not_of(" \t\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("params", std::string("malformed JSON: ") + e.what());
    }
  } else {
    j = read_json_file(text);
  }
  return setting_from_request(j, spec);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text << '\n';
}

RenderConfig render_config_from(const nlohmann::json& j) {
  RenderConfig cfg;
  cfg.resolution = j.value("resolution", cfg.resolution);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.absorption = j.value("absorption", cfg.absorption);
  cfg.extent = j.value("extent", cfg.extent);
  return cfg;
}

struct Options {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json section(const char* name) const {
    return config.contains(name) ? config.at(name) : nlohmann::json::object();
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image-synthesis surrogate for ensemble simulation parameter exploration", "vsur"};
  app.require_subcommand(1);
  app.fallthrough();
  Options g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--config", g.config_path, "JSON file with defaults (sections: render, generate, training, model, serve)");

  // generate
  auto* gen = app.add_subcommand("generate", "Render a synthetic ensemble image database");
  std::size_t members = 4, views = 2, n_colormaps = 2;
  int resolution = 64, workers = 1;
  double test_fraction = 0.1;
  fs::path gen_out;
  gen->add_option("--members", members, "Ensemble members")->check(CLI::PositiveNumber);
  gen->add_option("--views", views, "Views per member")->check(CLI::PositiveNumber);
  gen->add_option("--colormaps", n_colormaps, "Colormap options")->check(CLI::Range(1, 4));
  gen->add_option("--resolution", resolution, "Image side in pixels");
  gen->add_option("--test-fraction", test_fraction, "Fraction of members held out")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--workers", workers, "Render threads")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train the surrogate on an image database");
  fs::path tr_data, tr_out, tr_log, tr_resume;
  int k = 16;
  std::string loss;
  std::int64_t iterations = 0, checkpoint_every = 0;
  int batch = 0;
  double lambda = -1.0;
  bool deterministic = false, verbose = false;
  std::string comparator;
  tr->add_option("--data", tr_data, "Database directory")->required();
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr->add_option("--k", k, "Channel-width constant")->check(CLI::PositiveNumber);
  tr->add_option("--loss", loss, "mse | feat | adv | feat+adv");
  tr->add_option("--iterations", iterations, "Training iterations");
  tr->add_option("--batch", batch, "Batch size");
  tr->add_option("--lambda", lambda, "Adversarial weight");
  tr->add_option("--checkpoint-every", checkpoint_every, "Iterations between checkpoints");
  tr->add_option("--log", tr_log, "JSON-lines training log");
  tr->add_option("--resume", tr_resume, "Continue from this checkpoint");
  tr->add_option("--comparator", comparator, "\"fallback\" or pretrained comparator weights");
  tr->add_flag("--deterministic", deterministic, "Deterministic kernels, one thread");
  tr->add_flag("--verbose", verbose, "Print every log record");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a database split");
  fs::path ev_ckpt, ev_data, ev_out, ev_sheet;
  std::string ev_split = "test";
  int neighbours = 3;
  bool no_baseline = false;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Database directory")->required();
  ev->add_option("--split", ev_split, "train | test");
  ev->add_option("--neighbours", neighbours, "Interpolation baseline neighbours")->check(CLI::PositiveNumber);
  ev->add_flag("--no-baseline", no_baseline, "Skip the interpolation baseline");
  ev->add_option("--out", ev_out, "Write the report JSON here");
  ev->add_option("--contact-sheet", ev_sheet, "PNG of prediction | truth | baseline rows");

  // infer
  auto* inf = app.add_subcommand("infer", "Predict one image");
  fs::path inf_ckpt, inf_out;
  std::string inf_params;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint")->required();
  inf->add_option("--params", inf_params, "Setting as JSON text or a JSON file")->required();
  inf->add_option("--out", inf_out, "Output PNG")->required();

  // sensitivity
  auto* sen = app.add_subcommand("sensitivity", "Parameter sensitivity curves or block maps");
  fs::path sen_ckpt, sen_out, sen_overlay;
  std::string sen_params, sen_param;
  bool subregion = false, with_cd = false;
  int points = 128, block = 16;
  sen->add_option("--checkpoint", sen_ckpt, "Checkpoint")->required();
  sen->add_option("--params", sen_params, "Base setting as JSON text or a JSON file")->required();
  sen->add_option("--param", sen_param, "Simulation parameter name, or * for all")->required();
  sen->add_flag("--subregion", subregion, "Per-block map instead of a sweep curve");
  sen->add_flag("--central-difference", with_cd, "Also compute the finite-difference curve");
  sen->add_option("--points", points, "Sweep points")->check(CLI::Range(2, 100000));
  sen->add_option("--block", block, "Block size in pixels")->check(CLI::PositiveNumber);
  sen->add_option("--out", sen_out, "Write JSON here instead of stdout");
  sen->add_option("--overlay", sen_overlay, "White-to-red overlay PNG (with --subregion)");

  // serve
  auto* srv = app.add_subcommand("serve", "HTTP service for interactive exploration");
  fs::path srv_ckpt, srv_ui;
  ServiceConfig scfg;
  srv->add_option("--checkpoint", srv_ckpt, "Checkpoint")->required();
  srv->add_option("--port", scfg.port, "Port");
  srv->add_option("--host", scfg.host, "Bind address");
  srv->add_option("--block-size", scfg.block_size, "Subregion block size");
  srv->add_option("--sweep-points", scfg.sweep_points, "Points per sensitivity curve");
  srv->add_option("--ui-dir", srv_ui, "Static files served under /");

  std::vector<std::string> argv_store{"vsur"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (!g.config_path.empty()) g.config = read_json_file(g.config_path);

    if (*gen) {
      auto rcfg = render_config_from(g.section("render"));
      if (gen->count("--resolution")) rcfg.resolution = resolution;
      rcfg.validate();
      const auto gj = g.section("generate");
      GenerateOptions o;
      o.n_members = gen->count("--members") ? members : gj.value("members", members);
      o.n_views = gen->count("--views") ? views : gj.value("views", views);
      o.test_fraction = gen->count("--test-fraction") ? test_fraction : gj.value("test_fraction", test_fraction);
      o.workers = gen->count("--workers") ? workers : gj.value("workers", workers);
      o.seed = g.seed.value_or(gj.value("seed", std::uint64_t{0}));
      const auto nc = gen->count("--colormaps") ? n_colormaps : gj.value("colormaps", n_colormaps);
      const auto spec = synthetic_spec(rcfg, nc);
      const auto m = generate_database(spec, rcfg, o, gen_out);
      out << "wrote " << m.records.size() << " records (" << m.n_train << " train, " << m.n_test << " test) to "
          << gen_out.string() << '\n';
      return kExitOk;
    }

    if (*tr) {
      TrainingConfig tc = g.section("training").get<TrainingConfig>();
      if (!loss.empty()) tc.loss_mode = loss_mode_from_string(loss);
      if (tr->count("--iterations")) tc.max_iterations = iterations;
      if (tr->count("--batch")) tc.batch_size = batch;
      if (tr->count("--lambda")) tc.lambda = lambda;
      if (tr->count("--checkpoint-every")) tc.checkpoint_every = checkpoint_every;
      if (!comparator.empty()) tc.comparator = comparator;
      if (deterministic) tc.deterministic = true;
      if (g.seed) tc.seed = *g.seed;
      tc.validate();
      const auto manifest = open_manifest(tr_data);
      const auto mj = g.section("model");
      const int kk = tr->count("--k") ? k : mj.value("k", k);
      auto mcfg = ModelConfig::for_spec(manifest.spec, kk, manifest.resolution);
      mcfg.branch_width = mj.value("branch_width", mcfg.branch_width);
      TrainOptions to;
      to.checkpoint = tr_out;
      if (!tr_log.empty()) to.log_path = tr_log;
      if (!tr_resume.empty()) to.resume_from = tr_resume;
      to.verbose = verbose;
      const auto r = train(manifest, mcfg, tc, to);
      if (!r.log.empty()) out << to_json(r.log.back()).dump() << '\n';
      out << "checkpoint " << r.checkpoint.string() << '\n';
      return kExitOk;
    }

    if (*ev) {
      const auto model = load_checkpoint(ev_ckpt);
      const auto manifest = open_manifest(ev_data);
      EvaluateOptions o;
      o.split = split_from_string(ev_split);
      o.with_baseline = !no_baseline;
      o.baseline_neighbours = neighbours;
      if (!ev_sheet.empty()) o.contact_sheet = ev_sheet;
      o.comparator = g.section("training").value("comparator", o.comparator);
      const auto rep = evaluate_model(model, manifest, o).to_json();
      if (!ev_out.empty()) write_text(ev_out, rep.dump(2));
      out << rep.dump(2) << '\n';
      return kExitOk;
    }

    if (*inf) {
      auto model = load_checkpoint(inf_ckpt);
      const auto setting = read_setting(inf_params, model.meta.spec);
      torch::NoGradGuard no_grad;
      const auto img = model.regressor(encode_batch({setting}, model.meta.spec));
      write_png(tensor_to_image(img[0]), inf_out.string());
      out << "wrote " << inf_out.string() << '\n';
      return kExitOk;
    }

    if (*sen) {
      auto model = load_checkpoint(sen_ckpt);
      const auto setting = read_setting(sen_params, model.meta.spec);
      SensitivityAnalyzer an(model.regressor, model.meta.spec);
      nlohmann::json result;
      if (subregion) {
        if (sen_param == "*") throw ValidationError("param", "subregion mode needs one parameter");
        const auto m = an.subregion(setting, sen_param, block);
        result = to_json(m);
        if (!sen_overlay.empty()) write_png(sensitivity_overlay(m), sen_overlay.string());
      } else {
        std::vector<std::string> names;
        if (sen_param == "*") {
          for (const auto& p : model.meta.spec.sim_params) names.push_back(p.name);
        } else {
          names.push_back(sen_param);
        }
        nlohmann::json curves = nlohmann::json::array();
        for (const auto& n : names) {
          curves.push_back(to_json(an.overall(setting, n, points)));
          if (with_cd) curves.push_back(to_json(an.central_difference(setting, n, points)));
        }
        result = curves.size() == 1 ? curves.front() : nlohmann::json{{"curves", curves}};
      }
      if (!sen_out.empty()) {
        write_text(sen_out, result.dump(2));
      } else {
        out << result.dump(2) << '\n';
      }
      return kExitOk;
    }

    if (*srv) {
      const auto sj = g.section("serve");
      if (!srv->count("--port")) scfg.port = sj.value("port", scfg.port);
      if (!srv->count("--host")) scfg.host = sj.value("host", scfg.host);
      if (!srv->count("--block-size")) scfg.block_size = sj.value("block_size", scfg.block_size);
      if (!srv->count("--sweep-points")) scfg.sweep_points = sj.value("sweep_points", scfg.sweep_points);
      if (!srv_ui.empty()) scfg.ui_dir = srv_ui;
      ExploreService service(load_checkpoint(srv_ckpt), scfg);
      const int port = service.bind();
      out << "serving on http://" << scfg.host << ":" << port << '\n' << std::flush;
      service.run();
      return kExitOk;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace vsur
