#include "tda/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "tda/attribution.hpp"
#include "tda/errors.hpp"

namespace tda {

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

std::size_t rank_of_target(std::span<const double> tau, std::size_t target_id) {
  if (target_id >= tau.size()) {
    throw ArgumentError("rank_of_target: target id " + std::to_string(target_id) + " outside [0, " +
                        std::to_string(tau.size()) + ")");
  }
  const double v = tau[target_id];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < tau.size(); ++i) {
    if (tau[i] > v || (tau[i] == v && i < target_id)) ++rank;
  }
  return rank;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double topk_similarity(std::span<const double> tau, const std::vector<std::vector<double>>& embeddings,
                       std::span<const double> target_embedding, std::size_t k, Which which,
                       std::optional<std::size_t> exclude) {
  if (embeddings.size() != tau.size()) throw ShapeError("topk_similarity: embeddings and tau differ in length");
  auto order = descending_order(tau);
  if (exclude) std::erase(order, *exclude);
  if (k < 1 || k > order.size()) {
    throw ArgumentError("topk_similarity: k=" + std::to_string(k) + " outside [1, " + std::to_string(order.size()) + "]");
  }
  if (which == Which::Bottom) std::reverse(order.begin(), order.end());
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) sum += cosine(target_embedding, embeddings[order[i]]);
  return sum / static_cast<double>(k);
}

std::vector<double> minmax_normalize(std::span<const double> tau) {
  if (tau.empty()) throw ArgumentError("minmax_normalize: empty input");
  const auto [lo, hi] = std::minmax_element(tau.begin(), tau.end());
  std::vector<double> out(tau.size(), 0.5);
  if (*hi == *lo) return out;
  const double range = *hi - *lo;
  for (std::size_t i = 0; i < tau.size(); ++i) out[i] = (tau[i] - *lo) / range;
  return out;
}

std::vector<double> softmax_normalize(std::span<const double> tau) {
  if (tau.empty()) throw ArgumentError("softmax_normalize: empty input");
  const double m = *std::max_element(tau.begin(), tau.end());
  std::vector<double> out(tau.size());
  double z = 0;
  for (std::size_t i = 0; i < tau.size(); ++i) z += out[i] = std::exp(tau[i] - m);
  for (auto& v : out) v /= z;
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
  if (a.size() < 2) throw ArgumentError("pearson: need at least 2 points");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw DomainError("pearson: correlation undefined for constant input");
  return sab / std::sqrt(saa * sbb);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

using Mat = Eigen::MatrixXd;

void moments(const std::vector<std::vector<double>>& pts, Eigen::VectorXd& mu, Mat& cov) {
  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto d = static_cast<Eigen::Index>(pts[0].size());
  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(pts[i].size()) != d) throw ShapeError("frechet_distance: ragged embedding set");
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = pts[i][j];
  }
  mu = x.colwise().mean().transpose();
  const Mat c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(n - 1);
  cov += (1e-6 * cov.trace()) * Mat::Identity(d, d);
}

Mat sqrt_psd(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw ArgumentError("frechet_distance: empty embedding set");
  const std::size_t d = a[0].size();
  if (b[0].size() != d) throw ShapeError("frechet_distance: dimension mismatch");
  if (a.size() < d + 1 || b.size() < d + 1) {
    throw ArgumentError("frechet_distance: need at least " + std::to_string(d + 1) + " samples per set");
  }
  Eigen::VectorXd mu_a, mu_b;
  Mat sa, sb;
  moments(a, mu_a, sa);
  moments(b, mu_b, sb);
  const Mat ra = sqrt_psd(sa);
  Mat inner = ra * sb * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
  return std::max(fd, 0.0);
}

double sim_all_against_all(const EmbeddingSet& target, const EmbeddingSet& train) {
  if (target.count == 0 || train.count == 0) throw ArgumentError("sim_all_against_all: empty embedding set");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < target.count; ++i) {
    for (std::size_t j = 0; j < train.count; ++j) best = std::max(best, cosine(target.window(i), train.window(j)));
  }
  return best;
}

double sim_average(const EmbeddingSet& target, const EmbeddingSet& train) {
  if (target.count == 0 || train.count == 0) throw ArgumentError("sim_average: empty embedding set");
  return cosine(target.mean, train.mean);
}

std::vector<double> sim_all_against_all(const EmbeddingSet& target, const std::vector<EmbeddingSet>& train,
                                        Exec exec) {
  std::vector<double> out(train.size());
  for_each_index(train.size(), exec, [&](std::size_t i) { out[i] = sim_all_against_all(target, train[i]); });
  return out;
}

std::vector<double> sim_average(const EmbeddingSet& target, const std::vector<EmbeddingSet>& train) {
  std::vector<double> out(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) out[i] = sim_average(target, train[i]);
  return out;
}

ScoreReport make_report(std::string method, std::vector<double> tau) {
  ScoreReport r;
  r.method = std::move(method);
  r.minmax = minmax_normalize(tau);
  r.softmax = softmax_normalize(tau);
  r.tau = std::move(tau);
  return r;
}

std::string report_csv(std::span<const double> tau, std::span<const double> sim_aaa,
                       std::span<const double> sim_avg) {
  if (sim_aaa.size() != tau.size() || sim_avg.size() != tau.size()) throw ShapeError("report_csv: length mismatch");
  const auto mm = minmax_normalize(tau);
  const auto sm = softmax_normalize(tau);
  std::string s = "track_id,tau,minmax,softmax,sim_aaa,sim_avg\n";
  for (auto i : descending_order(tau)) {
    s += std::to_string(i) + "," + format_double(tau[i]) + "," + format_double(mm[i]) + "," + format_double(sm[i]) +
         "," + format_double(sim_aaa[i]) + "," + format_double(sim_avg[i]) + "\n";
  }
  return s;
}

nlohmann::json report_summary(const ScoreReport& r) {
  nlohmann::json j{{"method", r.method}, {"pearson", r.pearson_vs}};
  j["rank"] = r.rank ? nlohmann::json(*r.rank) : nlohmann::json(nullptr);
  j["sim_topk"] = r.sim_topk ? nlohmann::json(*r.sim_topk) : nlohmann::json(nullptr);
  j["sim_botk"] = r.sim_botk ? nlohmann::json(*r.sim_botk) : nlohmann::json(nullptr);
  return j;
}

}  // namespace tda
