#pragma once

// Attribution metrics and the embedding-similarity baselines.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tda/data.hpp"
#include "tda/parallel.hpp"

namespace tda {

// Track indices sorted by descending score, ties by ascending index.
std::vector<std::size_t> descending_order(std::span<const double> scores);

// 1-based position of `target_id` in descending order.
std::size_t rank_of_target(std::span<const double> tau, std::size_t target_id);

enum class Which { Top, Bottom };

// Mean cosine between `target_embedding` and the embeddings of the k tracks with
// the largest (Top) or smallest (Bottom) tau. `exclude` drops one track from the
// candidates (the target itself in self-influence mode).
double topk_similarity(std::span<const double> tau, const std::vector<std::vector<double>>& embeddings,
                       std::span<const double> target_embedding, std::size_t k, Which which,
                       std::optional<std::size_t> exclude = std::nullopt);

std::vector<double> minmax_normalize(std::span<const double> tau);
std::vector<double> softmax_normalize(std::span<const double> tau);

double pearson(std::span<const double> a, std::span<const double> b);
// Pearson on average ranks.
double spearman(std::span<const double> a, std::span<const double> b);

double cosine(std::span<const double> a, std::span<const double> b);

// Points are rows of equal dimension.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

double sim_all_against_all(const EmbeddingSet& target, const EmbeddingSet& train);
double sim_average(const EmbeddingSet& target, const EmbeddingSet& train);

std::vector<double> sim_all_against_all(const EmbeddingSet& target, const std::vector<EmbeddingSet>& train,
                                        Exec exec = Exec::Parallel);
std::vector<double> sim_average(const EmbeddingSet& target, const std::vector<EmbeddingSet>& train);

struct ScoreReport {
  std::string method;
  std::vector<double> tau;
  std::vector<double> minmax;
  std::vector<double> softmax;
  std::optional<std::size_t> rank;
  std::optional<double> sim_topk;
  std::optional<double> sim_botk;
  std::map<std::string, double> pearson_vs;
};

ScoreReport make_report(std::string method, std::vector<double> tau);

// track_id,tau,minmax,softmax,sim_aaa,sim_avg sorted by descending tau.
std::string report_csv(std::span<const double> tau, std::span<const double> sim_aaa,
                       std::span<const double> sim_avg);

nlohmann::json report_summary(const ScoreReport& r);

}  // namespace tda
