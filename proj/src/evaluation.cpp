#include "vsur/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "vsur/digest.hpp"
#include "vsur/errors.hpp"
#include "vsur/random.hpp"

namespace vsur {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.dim() != 3 || a.size(0) != 3) throw ShapeError(std::string(what) + ": expected (3, h, w)");
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": image sizes differ");
}

torch::Tensor gaussian_window() {
  auto x = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow - 1) / 2.0;
  auto g = torch::exp(-x.pow(2) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, kSsimWindow, kSsimWindow});
}

torch::Tensor luma(const torch::Tensor& img) {
  auto t = img.to(torch::kFloat64);
  return (0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2]).unsqueeze(0).unsqueeze(0);
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "psnr");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "ssim");
  if (a.size(1) < kSsimWindow || a.size(2) < kSsimWindow) {
    throw ValidationError("image", "SSIM needs images of at least 11x11, got " +
                                       std::to_string(a.size(2)) + "x" + std::to_string(a.size(1)));
  }
  torch::NoGradGuard no_grad;
  const double c1 = std::pow(0.01, 2), c2 = std::pow(0.03, 2);
  const auto w = gaussian_window();
  const auto x = luma(a), y = luma(b);
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, w); };
  const auto mx = filt(x), my = filt(y);
  const auto sxx = filt(x * x) - mx * mx;
  const auto syy = filt(y * y) - my * my;
  const auto sxy = filt(x * y) - mx * my;
  const auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

double color_emd(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "color_emd");
  auto hist = [](const torch::Tensor& ch) {
    auto idx = torch::clamp((ch.to(torch::kFloat64).flatten() * kEmdBins).floor(), 0, kEmdBins - 1)
                   .to(torch::kLong);
    auto h = torch::zeros({kEmdBins}, torch::kFloat64);
    h.index_add_(0, idx, torch::ones({idx.size(0)}, torch::kFloat64));
    return h / static_cast<double>(idx.size(0));
  };
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto ca = torch::cumsum(hist(a[c]), 0);
    const auto cb = torch::cumsum(hist(b[c]), 0);
    total += (ca - cb).abs().sum().item<double>() / kEmdBins;
  }
  return total / 3.0;
}

namespace {

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  const auto centered = x.rowwise() - mean.transpose();
  if (x.rows() < 2) return Eigen::MatrixXd::Zero(x.cols(), x.cols());
  return (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid_from_embeddings(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw ShapeError("fid: embedding widths differ");
  if (a.rows() == 0 || b.rows() == 0) throw ValidationError("fid", "empty image set");
  const Eigen::VectorXd ma = a.colwise().mean();
  const Eigen::VectorXd mb = b.colwise().mean();
  const Eigen::MatrixXd ca = covariance(a, ma);
  const Eigen::MatrixXd cb = covariance(b, mb);
  const Eigen::MatrixXd sa = psd_sqrt(ca);
  const Eigen::MatrixXd inner = sa * cb * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()),
                                                    Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

Embedder comparator_embedder(FeatureComparator comparator) {
  Embedder e;
  e.name = "comparator-" + comparator->layer() + "-avgpool(" + comparator->source() + ")";
  e.embed = [comparator](const torch::Tensor& images) mutable {
    torch::NoGradGuard no_grad;
    return comparator(images.to(torch::kFloat32)).mean({2, 3});
  };
  return e;
}

namespace {

Eigen::MatrixXd embed_all(const torch::Tensor& images01, const Embedder& embedder) {
  std::vector<torch::Tensor> parts;
  const auto n = images01.size(0);
  for (std::int64_t i = 0; i < n; i += 32) {
    const auto chunk = images01.slice(0, i, std::min(n, i + 32)).to(torch::kFloat32) * 2.0 - 1.0;
    parts.push_back(embedder.embed(chunk).to(torch::kFloat64).contiguous());
  }
  const auto all = torch::cat(parts, 0).contiguous();
  Eigen::MatrixXd m(all.size(0), all.size(1));
  auto acc = all.accessor<double, 2>();
  for (std::int64_t r = 0; r < all.size(0); ++r)
    for (std::int64_t c = 0; c < all.size(1); ++c) m(r, c) = acc[r][c];
  return m;
}

}  // namespace

double fid(const torch::Tensor& a, const torch::Tensor& b, const Embedder& embedder) {
  return fid_from_embeddings(embed_all(a, embedder), embed_all(b, embedder));
}

double diversity(const torch::Tensor& images01, std::size_t max_pairs, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(images01.size(0));
  if (n < 2) throw ValidationError("images", "diversity needs at least two images");
  const std::size_t all_pairs = n * (n - 1) / 2;
  double sum = 0.0;
  std::size_t count = 0;
  if (all_pairs <= max_pairs) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j, ++count) sum += ssim(images01[i], images01[j]);
  } else {
    std::mt19937_64 rng(mix_seed(seed, 77));
    for (; count < max_pairs; ++count) {
      const auto i = uniform_index(rng, n);
      auto j = uniform_index(rng, n - 1);
      if (j >= i) ++j;
      sum += ssim(images01[i], images01[j]);
    }
  }
  return 1.0 / (sum / static_cast<double>(count));
}

torch::Tensor interpolation_baseline(const ParameterSetting& setting, const ParameterSpec& spec,
                                     const SplitData& train, int g) {
  if (g < 1) throw ValidationError("g", "must be >= 1");
  if (train.size() == 0) throw ValidationError("train", "no training records");
  const auto query = encode_batch({setting}, spec).to(torch::kFloat64);
  const auto& p = train.params();
  auto flat = [](const EncodedBatch& e) {
    return torch::cat({e.sim.to(torch::kFloat64), e.vis.to(torch::kFloat64), e.view.to(torch::kFloat64)}, 1);
  };
  const auto dist = (flat(p) - flat(query)).pow(2).sum(1).sqrt();
  std::vector<double> d(dist.data_ptr<double>(), dist.data_ptr<double>() + dist.numel());
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return d[x] < d[y]; });
  if (d[order[0]] == 0.0) return train.images()[static_cast<std::int64_t>(order[0])].clone();
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(g), order.size());
  auto out = torch::zeros_like(train.images()[0], torch::kFloat32);
  double wsum = 0.0;
  for (std::size_t i = 0; i < take; ++i) wsum += 1.0 / d[order[i]];
  for (std::size_t i = 0; i < take; ++i) {
    out += train.images()[static_cast<std::int64_t>(order[i])] * (1.0 / d[order[i]] / wsum);
  }
  return out;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"psnr", r.psnr}, {"ssim", r.ssim}, {"emd", r.emd}, {"fid", r.fid},
          {"n_images", r.n_images}, {"embedder", r.embedder}, {"config_digest", r.config_digest}};
}

MetricsReport compare_images(const torch::Tensor& predictions01, const torch::Tensor& truth01,
                             const Embedder& embedder) {
  if (predictions01.sizes() != truth01.sizes()) throw ShapeError("compare_images: set sizes differ");
  MetricsReport r;
  r.n_images = static_cast<std::size_t>(truth01.size(0));
  r.embedder = embedder.name;
  if (r.n_images == 0) throw ValidationError("images", "nothing to compare");
  for (std::int64_t i = 0; i < truth01.size(0); ++i) {
    r.psnr += psnr(predictions01[i], truth01[i]);
    r.ssim += ssim(predictions01[i], truth01[i]);
    r.emd += color_emd(predictions01[i], truth01[i]);
  }
  const auto n = static_cast<double>(r.n_images);
  r.psnr /= n;
  r.ssim /= n;
  r.emd /= n;
  r.fid = fid(predictions01, truth01, embedder);
  return r;
}

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json j = {{"model", vsur::to_json(model)},
                      {"split", split},
                      {"checkpoint_digest", checkpoint_digest},
                      {"corpus_digest", corpus_digest}};
  if (baseline) {
    j["baseline"] = vsur::to_json(*baseline);
    j["baseline"]["neighbours"] = baseline_neighbours;
  }
  return j;
}

torch::Tensor to_unit_range(const torch::Tensor& t) {
  return torch::clamp((t.to(torch::kFloat64) + 1.0) / 2.0, 0.0, 1.0);
}

torch::Tensor predict_split(Regressor& regressor, const SplitData& data, int batch_size) {
  torch::NoGradGuard no_grad;
  regressor->eval();
  std::vector<torch::Tensor> out;
  const auto n = data.size();
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(n, i + static_cast<std::size_t>(batch_size)); ++j) idx.push_back(j);
    out.push_back(regressor(data.gather(idx).params));
  }
  return torch::cat(out, 0);
}

EvaluationReport evaluate_model(const LoadedModel& model, const Manifest& manifest,
                                const EvaluateOptions& opts) {
  if (model.meta.model.resolution != manifest.resolution) {
    throw ValidationError("resolution", "checkpoint resolution " + std::to_string(model.meta.model.resolution) +
                                            " differs from corpus resolution " +
                                            std::to_string(manifest.resolution));
  }
  SplitData data(manifest, opts.split);
  if (data.size() == 0) throw ValidationError("split", to_string(opts.split) + " split is empty");
  auto regressor = model.regressor;
  const auto embedder = comparator_embedder(FeatureComparator::from_source(opts.comparator));

  EvaluationReport rep;
  rep.split = to_string(opts.split);
  rep.checkpoint_digest = model.digest;
  rep.corpus_digest = file_digest(manifest.root / "manifest.json");
  rep.baseline_neighbours = opts.baseline_neighbours;

  const auto pred = to_unit_range(predict_split(regressor, data, opts.batch_size));
  const auto truth = to_unit_range(data.images());
  const auto digest = fnv1a_hex(nlohmann::json(model.meta.model).dump() + "|" + embedder.name);
  rep.model = compare_images(pred, truth, embedder);
  rep.model.config_digest = digest;

  torch::Tensor base;
  if (opts.with_baseline) {
    SplitData train(manifest, Split::train);
    std::vector<torch::Tensor> b;
    for (std::size_t i = 0; i < data.size(); ++i) {
      b.push_back(interpolation_baseline(data.record(i).setting, manifest.spec, train, opts.baseline_neighbours));
    }
    base = to_unit_range(torch::stack(b));
    rep.baseline = compare_images(base, truth, embedder);
    rep.baseline->config_digest = fnv1a_hex("idw-g" + std::to_string(opts.baseline_neighbours) + "|" + embedder.name);
  }

  if (opts.contact_sheet) {
    std::vector<Image> rows;
    const auto n = std::min<std::int64_t>(opts.contact_rows, pred.size(0));
    auto img = [](const torch::Tensor& t01) { return tensor_to_image(t01 * 2.0 - 1.0); };
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<Image> cols{img(pred[i]), img(truth[i])};
      if (base.defined()) cols.push_back(img(base[i]));
      rows.push_back(hconcat(cols));
    }
    write_png(vconcat(rows), opts.contact_sheet->string());
  }
  return rep;
}

}  // namespace vsur
