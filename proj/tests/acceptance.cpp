// Acceptance suite P1-P9. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   vsur_acceptance [--work DIR] [--only P5,P7]
//
// The desk-scale corpus and checkpoints live under DIR and are reused across
// runs when their recorded configuration matches.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "vsur/errors.hpp"
#include "vsur/evaluation.hpp"
#include "vsur/image.hpp"
#include "vsur/sensitivity.hpp"
#include "vsur/service.hpp"
#include "vsur/synthetic_ensemble.hpp"
#include "vsur/training.hpp"

#include <CLI11.hpp>
#include <httplib.h>

namespace fs = std::filesystem;
using namespace vsur;

namespace {

// Tolerances and workload sizes.
constexpr double kP1Tol = 1e-9;
constexpr double kP1FidTol = 1e-3;
constexpr double kP2RelTol = 1e-3;
constexpr int kP2Coordinates = 10;
constexpr double kP3Lo = 0.9, kP3Hi = 1.1;
constexpr int kP3WarmUp = 10;
constexpr double kP3OrthoTol = 1e-5;
constexpr double kP4Target = 0.01;
constexpr int kP4Iterations = 500;
constexpr double kP5MarginDb = 1.0;
constexpr double kP6FidRatio = 0.8;
constexpr double kP7RelL2 = 0.05;
constexpr int kP7Points = 128;
constexpr double kP7BlockTol = 1e-4;
constexpr double kP9LatencyMs = 200.0;
constexpr int kP9Concurrent = 32;

// Desk-scale configuration shared by P5-P7 and P9.
constexpr std::size_t kMembers = 220, kTestMembers = 20, kViews = 4, kColormaps = 2;
constexpr std::uint64_t kCorpusSeed = 7, kTrainSeed = 0;
constexpr int kK = 16, kRes = 64;
constexpr std::int64_t kIterations = 5000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void log(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

// P1 ------------------------------------------------------------------------

Outcome p1() {
  torch::manual_seed(1);
  const auto x = torch::rand({4, 3, 32, 32}, torch::kFloat64) * 2 - 1;
  auto comp = FeatureComparator::fallback();
  const auto x32 = x.to(torch::kFloat32);
  const double l_mse = vsur::mse_loss(x, x).item<double>();
  const double l_feat = feature_loss(comp, x32, x32).item<double>();
  const auto u = to_unit_range(x);
  double emd = 0.0, ss = 0.0, ps = 0.0;
  for (int i = 0; i < 4; ++i) {
    emd = std::max(emd, color_emd(u[i], u[i]));
    ss = std::max(ss, std::abs(1.0 - ssim(u[i], u[i])));
    ps = std::max(ps, std::abs(psnr(u[i], u[i]) - kPsnrCap));
  }
  const double adv = adv_loss_D(torch::full({8}, 0.5, torch::kFloat64), torch::full({8}, 0.5, torch::kFloat64))
                         .item<double>();
  const double f = fid(u, u, comparator_embedder(comp));
  const bool ok = l_mse <= kP1Tol && l_feat <= kP1Tol && emd <= kP1Tol && ss <= kP1Tol && ps <= kP1Tol &&
                  std::abs(adv - 2 * std::log(2.0)) <= kP1Tol && f <= kP1FidTol;
  return {ok, "L_mse=" + fmt(l_mse) + " L_feat=" + fmt(l_feat) + " EMD=" + fmt(emd) + " |1-SSIM|=" + fmt(ss) +
                  " adv_D=" + fmt(adv, 8) + " FID(A,A)=" + fmt(f)};
}

// P2 ------------------------------------------------------------------------

ParameterSpec small_spec() {
  ParameterSpec s;
  s.sim_params = {{"p1", 0.2, 0.8}, {"p2", 0.0, 1.0}};
  s.vis_params = {{"colormap", {"a", "b"}}};
  return s;
}

Outcome p2() {
  const auto spec = small_spec();
  auto cfg = ModelConfig::for_spec(spec, 4, 16);
  Regressor r(cfg, 3);
  r->to(torch::kFloat64);
  r->train();
  auto comp = FeatureComparator::fallback();
  comp->to(torch::kFloat64);
  const auto params = encode_batch(sample_settings(spec, 2, 1, 5), spec, torch::kFloat64);
  torch::manual_seed(2);
  const auto target = torch::rand({params.size(), 3, 16, 16}, torch::kFloat64) * 2 - 1;
  auto loss = [&] { return feature_loss(comp, r(params), target); };

  r->zero_grad();
  loss().backward();
  std::vector<torch::Tensor> ps;
  for (auto& p : r->parameters()) ps.push_back(p);
  std::mt19937_64 rng(11);
  double worst_feat = 0.0;
  for (int c = 0; c < kP2Coordinates; ++c) {
    auto& p = ps[std::uniform_int_distribution<std::size_t>(0, ps.size() - 1)(rng)];
    const auto idx = std::uniform_int_distribution<std::int64_t>(0, p.numel() - 1)(rng);
    const double analytic = p.grad().view(-1)[idx].item<double>();
    const double h = 1e-6;
    torch::NoGradGuard ng;
    auto flat = p.view(-1);
    const double orig = flat[idx].item<double>();
    flat[idx] = orig + h;
    const double up = loss().item<double>();
    flat[idx] = orig - h;
    const double down = loss().item<double>();
    flat[idx] = orig;
    worst_feat = std::max(worst_feat, rel_err(analytic, (up - down) / (2 * h)));
  }

  r->eval();
  SensitivityAnalyzer an(r, spec);
  const auto settings = sample_settings(spec, kP2Coordinates, 1, 9);
  double worst_sens = 0.0;
  for (int c = 0; c < kP2Coordinates; ++c) {
    const auto& s = settings[static_cast<std::size_t>(c) * 2];
    const std::size_t pi = static_cast<std::size_t>(c) % 2;
    const auto& range = spec.sim_params[pi];
    const double h = 1e-7 * (range.max - range.min);
    auto plus = s, minus = s;
    plus.sim_values[pi] += h;
    minus.sim_values[pi] -= h;
    const double fd = (an.image_l1(plus) - an.image_l1(minus)) / (2 * h);
    worst_sens = std::max(worst_sens, rel_err(an.derivative(s, range.name), fd));
  }
  return {worst_feat <= kP2RelTol && worst_sens <= kP2RelTol,
          "max rel err L_feat=" + fmt(worst_feat) + " sensitivity=" + fmt(worst_sens)};
}

// P3 ------------------------------------------------------------------------

double max_ortho_error(torch::nn::Module& m) {
  double worst = 0.0;
  for (const auto& p : m.named_parameters()) {
    if (p.key().find("weight") == std::string::npos || p.value().dim() < 2) continue;
    const auto w = p.value().detach().reshape({p.value().size(0), -1}).to(torch::kFloat64);
    const auto g = w.size(0) <= w.size(1) ? torch::mm(w, w.t()) : torch::mm(w.t(), w);
    worst = std::max(worst, (g - torch::eye(g.size(0), torch::kFloat64)).abs().max().item<double>());
  }
  return worst;
}

Outcome p3() {
  const auto spec = synthetic_spec(RenderConfig{}, kColormaps);
  const auto cfg = ModelConfig::for_spec(spec, kK, kRes);
  Regressor r(cfg, 1);
  Discriminator d(cfg, 2);
  const double ortho = std::max(max_ortho_error(*r), max_ortho_error(*d));

  d->train();
  torch::optim::Adam opt(d->parameters(), torch::optim::AdamOptions(2e-4).betas({0.0, 0.999}));
  const auto params = encode_batch(sample_settings(spec, 4, 1, 3), spec);
  torch::manual_seed(3);
  for (int i = 0; i < kP3WarmUp; ++i) {
    opt.zero_grad();
    const auto real = torch::rand({params.size(), 3, kRes, kRes}) * 2 - 1;
    const auto fake = torch::rand({params.size(), 3, kRes, kRes}) * 2 - 1;
    adv_loss_D_logits(d->logits(real, params), d->logits(fake, params)).backward();
    opt.step();
  }
  double lo = INFINITY, hi = 0.0;
  torch::NoGradGuard ng;
  for (const auto& [name, w] : d->normalized_weights()) {
    const double s = torch::linalg_svdvals(w.reshape({w.size(0), -1}).to(torch::kFloat64))[0].item<double>();
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  return {lo >= kP3Lo && hi <= kP3Hi && ortho <= kP3OrthoTol,
          "sigma in [" + fmt(lo) + ", " + fmt(hi) + "], max |WWt - I|=" + fmt(ortho)};
}

// P4 ------------------------------------------------------------------------

Outcome p4(const fs::path& work) {
  const fs::path dir = work / "p4";
  fs::remove_all(dir);
  RenderConfig rc;
  GenerateOptions go;
  go.n_members = 1;
  go.n_views = 1;
  go.test_fraction = 0.0;
  go.seed = 4;
  const auto m = generate_database(synthetic_spec(rc, 1), rc, go, dir / "corpus");
  TrainingConfig tc;
  tc.loss_mode = LossMode::mse;
  tc.max_iterations = kP4Iterations;
  tc.checkpoint_every = kP4Iterations;
  TrainOptions o;
  o.checkpoint = dir / "overfit.ckpt";
  std::int64_t reached = -1;
  double best = INFINITY;
  const auto res = train(m, ModelConfig::for_spec(m.spec, kK, kRes), tc, o);
  for (const auto& rec : res.log) {
    best = std::min(best, rec.l_mse);
    if (reached < 0 && rec.l_mse < kP4Target) reached = rec.iteration;
  }
  return {reached > 0, "records=" + std::to_string(m.records.size()) + " min L_mse=" + fmt(best) +
                           (reached > 0 ? " below target at iteration " + std::to_string(reached) : "")};
}

// Desk-scale corpus and checkpoints ------------------------------------------

Manifest desk_corpus(const fs::path& work) {
  const fs::path dir = work / "p5" / "corpus";
  try {
    auto m = open_manifest(dir, false);
    if (m.records.size() == kMembers * kViews * kColormaps && m.seed == kCorpusSeed && m.resolution == kRes &&
        m.n_test == kTestMembers * kViews * kColormaps) {
      log("reusing corpus " + dir.string());
      return open_manifest(dir);
    }
  } catch (const std::exception&) {
  }
  log("generating corpus " + dir.string());
  fs::remove_all(dir);
  RenderConfig rc;
  GenerateOptions go;
  go.n_members = kMembers;
  go.n_views = kViews;
  go.test_fraction = static_cast<double>(kTestMembers) / static_cast<double>(kMembers);
  go.seed = kCorpusSeed;
  return generate_database(synthetic_spec(rc, kColormaps), rc, go, dir);
}

TrainingConfig desk_training(LossMode mode) {
  TrainingConfig tc;
  tc.loss_mode = mode;
  tc.max_iterations = kIterations;
  tc.seed = kTrainSeed;
  return tc;
}

LoadedModel desk_model(const Manifest& m, const fs::path& ckpt, LossMode mode) {
  const auto tc = desk_training(mode);
  const auto mc = ModelConfig::for_spec(m.spec, kK, kRes);
  if (fs::exists(ckpt)) {
    try {
      auto loaded = load_checkpoint(ckpt, mc);
      const auto saved = loaded.meta.training.get<TrainingConfig>();
      if (loaded.meta.iteration == kIterations && saved.loss_mode == mode && saved.lambda == tc.lambda &&
          saved.batch_size == tc.batch_size && saved.seed == tc.seed && saved.lr_regressor == tc.lr_regressor &&
          saved.lr_discriminator == tc.lr_discriminator && loaded.meta.spec == m.spec) {
        log("reusing checkpoint " + ckpt.string());
        return loaded;
      }
    } catch (const std::exception& e) {
      log(std::string("checkpoint not reusable: ") + e.what());
    }
  }
  log("training " + to_string(mode) + " -> " + ckpt.string() + " (" + std::to_string(kIterations) + " iterations)");
  fs::create_directories(ckpt.parent_path());
  TrainOptions o;
  o.checkpoint = ckpt;
  o.log_path = fs::path(ckpt).replace_extension(".log");
  fs::remove(*o.log_path);
  train(m, mc, tc, o);
  return load_checkpoint(ckpt, mc);
}

struct Desk {
  fs::path work;
  std::optional<Manifest> manifest;
  std::optional<LoadedModel> feat_adv, mse;
  std::optional<EvaluationReport> feat_adv_report, mse_report;

  const Manifest& corpus() {
    if (!manifest) manifest = desk_corpus(work);
    return *manifest;
  }
  const LoadedModel& fa() {
    if (!feat_adv) feat_adv = desk_model(corpus(), work / "p5" / "feat_adv.ckpt", LossMode::feat_adv);
    return *feat_adv;
  }
  const LoadedModel& ms() {
    if (!mse) mse = desk_model(corpus(), work / "p6" / "mse.ckpt", LossMode::mse);
    return *mse;
  }
  const EvaluationReport& fa_report() {
    if (!feat_adv_report) {
      EvaluateOptions o;
      o.contact_sheet = work / "p5" / "contact_sheet.png";
      feat_adv_report = evaluate_model(fa(), corpus(), o);
      std::ofstream(work / "p5" / "report.json") << feat_adv_report->to_json().dump(2);
    }
    return *feat_adv_report;
  }
  const EvaluationReport& mse_report_() {
    if (!mse_report) {
      EvaluateOptions o;
      o.with_baseline = false;
      mse_report = evaluate_model(ms(), corpus(), o);
      std::ofstream(work / "p6" / "report.json") << mse_report->to_json().dump(2);
    }
    return *mse_report;
  }
};

// P5 ------------------------------------------------------------------------

Outcome p5(Desk& desk) {
  const auto& rep = desk.fa_report();
  const auto& m = rep.model;
  const auto& b = *rep.baseline;
  const bool ok = m.psnr >= b.psnr + kP5MarginDb && m.emd < b.emd && m.fid < b.fid;
  return {ok, "model PSNR=" + fmt(m.psnr) + " EMD=" + fmt(m.emd) + " FID=" + fmt(m.fid) + " | baseline PSNR=" +
                  fmt(b.psnr) + " EMD=" + fmt(b.emd) + " FID=" + fmt(b.fid)};
}

// P6 ------------------------------------------------------------------------

Outcome p6(Desk& desk) {
  const auto& fa = desk.fa_report().model;
  const auto& ms = desk.mse_report_().model;
  const bool ok = ms.psnr >= fa.psnr && fa.fid <= kP6FidRatio * ms.fid;
  return {ok, "mse PSNR=" + fmt(ms.psnr) + " FID=" + fmt(ms.fid) + " | feat+adv PSNR=" + fmt(fa.psnr) +
                  " FID=" + fmt(fa.fid) + " (ratio " + fmt(fa.fid / ms.fid) + ")"};
}

// P7 ------------------------------------------------------------------------

Outcome p7(Desk& desk) {
  const auto& model = desk.fa();
  SensitivityAnalyzer an(model.regressor, model.meta.spec);
  const auto base = desk.corpus().split_records(Split::test).front()->setting;
  double worst = 0.0;
  std::string per;
  for (const auto& p : model.meta.spec.sim_params) {
    const auto bp = an.overall(base, p.name, kP7Points);
    const auto cd = an.central_difference(base, p.name, kP7Points);
    const double e = relative_l2(bp.signed_values, cd.signed_values);
    worst = std::max(worst, e);
    per += " " + p.name + "=" + fmt(e);
  }
  double block_err = 0.0;
  for (const auto& p : model.meta.spec.sim_params) {
    const auto m = an.subregion(base, p.name, 16);
    const double sum = std::accumulate(m.signed_values.begin(), m.signed_values.end(), 0.0);
    block_err = std::max(block_err, std::abs(sum - m.whole_image));
  }
  return {worst <= kP7RelL2 && block_err <= kP7BlockTol,
          "relative L2" + per + "; block sum error=" + fmt(block_err)};
}

// P8 ------------------------------------------------------------------------

Outcome p8(const fs::path& work) {
  const fs::path dir = work / "p8";
  fs::remove_all(dir);
  RenderConfig rc;
  GenerateOptions go;
  go.n_members = 6;
  go.n_views = 2;
  go.seed = 21;
  const auto spec = synthetic_spec(rc, kColormaps);
  const auto ma = generate_database(spec, rc, go, dir / "a");
  go.workers = 2;
  generate_database(spec, rc, go, dir / "b");
  bool same_corpus = slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json");
  for (const auto& r : ma.records) same_corpus = same_corpus && slurp(dir / "a" / r.file) == slurp(dir / "b" / r.file);

  const auto cfg = ModelConfig::for_spec(spec, kK, kRes);
  bool same_png = false;
  {
    Regressor r(cfg, 5);
    r->eval();
    torch::NoGradGuard ng;
    const auto params = encode_batch({ma.records[3].setting}, spec);
    same_png = encode_png(tensor_to_image(r(params)[0])) == encode_png(tensor_to_image(r(params)[0]));
  }

  auto small = ModelConfig::for_spec(spec, 4, kRes);
  TrainingConfig tc = desk_training(LossMode::feat_adv);
  tc.max_iterations = 10;
  tc.batch_size = 4;
  tc.deterministic = true;
  auto run = [&](const std::string& name) {
    TrainOptions o;
    o.checkpoint = dir / (name + ".ckpt");
    return train(ma, small, tc, o).log;
  };
  const auto la = run("ta"), lb = run("tb");
  bool same_log = la.size() == 10 && lb.size() == 10;
  for (std::size_t i = 0; same_log && i < la.size(); ++i) same_log = same_losses(la[i], lb[i]);
  return {same_corpus && same_png && same_log, std::string("manifest+images ") + (same_corpus ? "identical" : "DIFFER") +
                                                   ", inference PNG " + (same_png ? "identical" : "DIFFERS") +
                                                   ", training replay " + (same_log ? "identical" : "DIFFERS")};
}

// P9 ------------------------------------------------------------------------

Outcome p9(Desk& desk) {
  const auto& model = desk.fa();
  ServiceConfig cfg;
  cfg.port = 0;
  ExploreService svc(load_checkpoint(desk.work / "p5" / "feat_adv.ckpt"), cfg);
  const int port = svc.bind();
  std::thread th([&] { svc.run(); });
  auto client = [&] {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  };
  std::vector<std::string> problems;

  auto c = client();
  auto spec = c.Get("/spec");
  if (!spec || spec->status != 200 ||
      nlohmann::json::parse(spec->body).get<ParameterSpec>() != model.meta.spec) {
    problems.push_back("/spec");
  }
  auto bad = c.Post("/infer", R"({"sim_values": [0.95, 0.5], "vis_choices": [0], "view": {"azimuth": 0, "elevation": 0}})",
                    "application/json");
  if (!bad || bad->status != 422 || nlohmann::json::parse(bad->body).value("field", "") != "p1") {
    problems.push_back("422");
  }

  const auto tests = desk.corpus().split_records(Split::test);
  const std::string body = nlohmann::json{{"setting", tests.front()->setting}}.dump();
  std::vector<std::string> payloads(kP9Concurrent);
  std::vector<std::thread> ts;
  for (int i = 0; i < kP9Concurrent; ++i) {
    ts.emplace_back([&, i] {
      auto cl = client();
      auto res = cl.Post("/infer", body, "application/json");
      if (res && res->status == 200) payloads[i] = nlohmann::json::parse(res->body).at("image");
    });
  }
  for (auto& t : ts) t.join();
  const bool identical = !payloads[0].empty() &&
                         std::all_of(payloads.begin(), payloads.end(), [&](const auto& p) { return p == payloads[0]; });
  if (!identical) problems.push_back("concurrent payloads");

  // Round-trip latency of uncached requests.
  double worst = 0.0;
  for (std::size_t i = 1; i <= 10 && i < tests.size(); ++i) {
    const std::string b = nlohmann::json{{"setting", tests[i]->setting}}.dump();
    const auto t0 = std::chrono::steady_clock::now();
    auto res = c.Post("/infer", b, "application/json");
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!res || res->status != 200) problems.push_back("infer status");
    worst = std::max(worst, ms);
  }
  svc.stop();
  th.join();
  if (worst >= kP9LatencyMs) problems.push_back("latency");
  std::string detail = std::to_string(kP9Concurrent) + " concurrent " + (identical ? "identical" : "MISMATCH") +
                       ", max uncached latency=" + fmt(worst) + " ms";
  for (const auto& p : problems) detail += " [failed: " + p + "]";
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work = VSUR_ACCEPTANCE_WORK;
  std::string only;
  app.add_option("--work", work, "Working directory for corpora and checkpoints");
  app.add_option("--only", only, "Comma-separated subset, e.g. P1,P5");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  Desk desk{work};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> suite = {
      {"P1", [] { return p1(); }},
      {"P2", [] { return p2(); }},
      {"P3", [] { return p3(); }},
      {"P4", [&] { return p4(work); }},
      {"P5", [&] { return p5(desk); }},
      {"P6", [&] { return p6(desk); }},
      {"P7", [&] { return p7(desk); }},
      {"P8", [&] { return p8(work); }},
      {"P9", [&] { return p9(desk); }},
  };
  std::set<std::string> selected;
  for (std::stringstream ss(only); ss.good();) {
    std::string s;
    std::getline(ss, s, ',');
    if (!s.empty()) selected.insert(s);
  }

  int failures = 0;
  for (const auto& [name, fn] : suite) {
    if (!selected.empty() && !selected.count(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::cout << name << " " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  (" << fmt(s, 3) << " s)"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
