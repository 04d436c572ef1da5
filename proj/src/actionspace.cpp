#include "poisonforge/actionspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

namespace poisonforge {

using Eigen::MatrixXd;
using nlohmann::json;

namespace {

constexpr double kNmfEps = 1e-12;

double reconstruction_error(const Eigen::SparseMatrix<double>& x, const MatrixXd& w, const MatrixXd& h) {
  if (x.rows() * x.cols() <= 4'000'000) {
    return (MatrixXd(x) - w * h.transpose()).squaredNorm();
  }
  // ||X||^2 - 2 tr(W^T X H) + tr(W^T W H^T H)
  const double xx = x.squaredNorm();
  const double cross = (w.transpose() * (x * h)).trace();
  const double model = ((w.transpose() * w) * (h.transpose() * h)).trace();
  return std::max(0.0, xx - 2.0 * cross + model);
}

}  // namespace

NmfResult nmf(const Eigen::SparseMatrix<double>& x, int rank, int iterations, std::uint64_t seed) {
  if (rank < 1 || iterations < 0) throw Error(ErrorCode::kInvalidArgument, "nmf requires rank >= 1");
  Rng rng(derive_seed(seed, "nmf"));
  const double mean = x.rows() * x.cols() > 0 ? x.sum() / static_cast<double>(x.rows() * x.cols()) : 0.0;
  const double scale = std::sqrt(std::max(mean, 1e-6) / rank);
  std::uniform_real_distribution<double> init(0.01, 1.0);
  NmfResult out;
  out.user_factors = MatrixXd::NullaryExpr(x.rows(), rank, [&] { return scale * init(rng); });
  out.item_factors = MatrixXd::NullaryExpr(x.cols(), rank, [&] { return scale * init(rng); });
  MatrixXd& w = out.user_factors;
  MatrixXd& h = out.item_factors;
  const Eigen::SparseMatrix<double> xt = x.transpose();
  for (int it = 0; it < iterations; ++it) {
    const MatrixXd wn = x * h;
    const MatrixXd wd = w * (h.transpose() * h);
    w = w.cwiseProduct(wn).cwiseQuotient(wd.array().max(kNmfEps).matrix());
    const MatrixXd hn = xt * w;
    const MatrixXd hd = h * (w.transpose() * w);
    h = h.cwiseProduct(hn).cwiseQuotient(hd.array().max(kNmfEps).matrix());
    if (!w.allFinite() || !h.allFinite()) {
      throw Error(ErrorCode::kNumeric, "nmf: non-finite factor at iteration " + std::to_string(it));
    }
    out.error.push_back(reconstruction_error(x, w, h));
  }
  return out;
}

Eigen::SparseMatrix<double> interaction_matrix(const Dataset& ds) {
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(ds.num_train_interactions());
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    for (ItemId i : ds.train(static_cast<UserId>(u))) entries.emplace_back(static_cast<int>(u), i, 1.0);
  }
  Eigen::SparseMatrix<double> x(static_cast<Eigen::Index>(ds.num_users()),
                                static_cast<Eigen::Index>(ds.num_items()));
  // Repeated (user, item) pairs stay binary.
  x.setFromTriplets(entries.begin(), entries.end(), [](double a, double) { return a; });
  return x;
}

MatrixXd nmf_item_features(const Dataset& ds, int rank, int iterations, std::uint64_t seed) {
  return nmf(interaction_matrix(ds), rank, iterations, seed).item_factors;
}

// ---------------------------------------------------------------------------

double wcss(const MatrixXd& points, std::span<const int> assignment, int clusters) {
  MatrixXd sums = MatrixXd::Zero(clusters, points.cols());
  std::vector<int> counts(clusters, 0);
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    sums.row(assignment[p]) += points.row(p);
    ++counts[assignment[p]];
  }
  double total = 0.0;
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    const int c = assignment[p];
    total += (points.row(p) - sums.row(c) / counts[c]).squaredNorm();
  }
  return total;
}

KMeansResult kmeans(const MatrixXd& points, int clusters, std::uint64_t seed, int max_iters) {
  const Eigen::Index n = points.rows();
  if (clusters < 1 || clusters > n) {
    throw Error(ErrorCode::kInvalidArgument, "kmeans requires 1 <= clusters <= points");
  }
  Rng rng(derive_seed(seed, "kmeans"));
  KMeansResult out;
  MatrixXd& centers = out.centroids;
  centers.resize(clusters, points.cols());

  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  centers.row(0) = points.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
  for (int c = 1; c < clusters; ++c) {
    for (Eigen::Index p = 0; p < n; ++p) {
      d2[p] = std::min(d2[p], (points.row(p) - centers.row(c - 1)).squaredNorm());
    }
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick;
    if (total > 0) {
      pick = std::discrete_distribution<Eigen::Index>(d2.begin(), d2.end())(rng);
    } else {
      pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    centers.row(c) = points.row(pick);
  }

  auto& assign = out.assignment;
  assign.assign(n, -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (Eigen::Index p = 0; p < n; ++p) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < clusters; ++c) {
        const double d = (points.row(p) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[p] != best) {
        assign[p] = best;
        changed = true;
      }
    }
    out.iterations = it + 1;
    if (!changed && it > 0) break;

    std::vector<int> counts(clusters, 0);
    centers.setZero();
    for (Eigen::Index p = 0; p < n; ++p) {
      centers.row(assign[p]) += points.row(p);
      ++counts[assign[p]];
    }
    for (int c = 0; c < clusters; ++c) {
      if (counts[c] > 0) centers.row(c) /= counts[c];
    }
    for (int c = 0; c < clusters; ++c) {
      if (counts[c] > 0) continue;
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index p = 0; p < n; ++p) {
        if (counts[assign[p]] < 2) continue;
        const double d = (points.row(p) - centers.row(assign[p])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = p;
        }
      }
      if (far < 0) break;
      const int from = assign[far];
      centers.row(from) = (centers.row(from) * counts[from] - points.row(far)) / (counts[from] - 1);
      --counts[from];
      centers.row(c) = points.row(far);
      counts[c] = 1;
      assign[far] = c;
    }
  }
  out.wcss = wcss(points, assign, clusters);
  return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::kTarget: return "target";
    case GroupKind::kHistory: return "history";
    case GroupKind::kCluster: return "cluster";
  }
  return "cluster";
}

namespace {

GroupKind parse_group_kind(const std::string& s) {
  if (s == "target") return GroupKind::kTarget;
  if (s == "history") return GroupKind::kHistory;
  if (s == "cluster") return GroupKind::kCluster;
  throw Error(ErrorCode::kParse, "unknown group kind '" + s + "'");
}

}  // namespace

ItemGroups::ItemGroups(std::vector<std::vector<ItemId>> groups, std::vector<GroupKind> kinds)
    : groups_(std::move(groups)), kinds_(std::move(kinds)) {
  if (groups_.size() != kinds_.size()) {
    throw Error(ErrorCode::kInvalidArgument, "item groups: kinds do not match groups");
  }
  ItemId max_item = -1;
  for (const auto& g : groups_) {
    if (g.empty()) throw Error(ErrorCode::kInvalidArgument, "item groups: empty group");
    for (ItemId i : g) {
      if (i < 0) throw Error(ErrorCode::kInvalidArgument, "item groups: negative item id");
      max_item = std::max(max_item, i);
    }
  }
  item_group_.assign(static_cast<std::size_t>(max_item + 1), -1);
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (ItemId i : groups_[g]) {
      if (item_group_[i] != -1) {
        throw Error(ErrorCode::kInvalidArgument, "item groups: item " + std::to_string(i) + " in two groups");
      }
      item_group_[i] = static_cast<int>(g);
    }
  }
}

int ItemGroups::group_of(ItemId i) const {
  if (i < 0 || static_cast<std::size_t>(i) >= item_group_.size()) return -1;
  return item_group_[i];
}

SampledItem ItemGroups::sample_item(int g, std::span<const ItemId> forbidden, Rng& rng) const {
  if (g < 0 || static_cast<std::size_t>(g) >= groups_.size()) {
    throw Error(ErrorCode::kInvalidArgument, "sample_item: group " + std::to_string(g) + " out of range");
  }
  auto available = [&](int k) {
    std::vector<ItemId> out;
    for (ItemId i : groups_[k]) {
      if (std::find(forbidden.begin(), forbidden.end(), i) == forbidden.end()) out.push_back(i);
    }
    return out;
  };
  auto pick = [&](const std::vector<ItemId>& items) {
    return items[std::uniform_int_distribution<std::size_t>(0, items.size() - 1)(rng)];
  };
  if (auto items = available(g); !items.empty()) return {pick(items), g, false};

  std::vector<int> open;
  for (std::size_t k = 0; k < groups_.size(); ++k) {
    if (!available(static_cast<int>(k)).empty()) open.push_back(static_cast<int>(k));
  }
  if (open.empty()) throw Error(ErrorCode::kEmpty, "sample_item: every group is exhausted");
  const int alt = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
  spdlog::trace("group {} exhausted, sampling from group {}", g, alt);
  return {pick(available(alt)), alt, true};
}

json ItemGroups::to_json() const {
  json groups = json::array();
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    groups.push_back({{"id", g}, {"kind", to_string(kinds_[g])}, {"items", groups_[g]}});
  }
  return json{{"version", 1}, {"groups", std::move(groups)}};
}

ItemGroups ItemGroups::from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw Error(ErrorCode::kParse, "unsupported groups version");
    std::vector<std::vector<ItemId>> groups;
    std::vector<GroupKind> kinds;
    for (const auto& g : j.at("groups")) {
      groups.push_back(g.at("items").get<std::vector<ItemId>>());
      kinds.push_back(parse_group_kind(g.at("kind").get<std::string>()));
    }
    return ItemGroups(std::move(groups), std::move(kinds));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed groups: ") + e.what());
  }
}

void ItemGroups::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

ItemGroups ItemGroups::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

ItemGroups build_groups(const Dataset& ds, const TargetSpec& targets, std::span<const int> assignment) {
  if (targets.items.empty()) throw Error(ErrorCode::kEmpty, "build_groups: no target items");
  if (assignment.size() != ds.num_items()) {
    throw Error(ErrorCode::kInvalidArgument, "build_groups: assignment does not cover the catalog");
  }
  std::vector<int> special(ds.num_items(), -1);
  std::vector<ItemId> target_group;
  for (ItemId i : targets.items) {
    if (special.at(i) == -1) target_group.push_back(i);
    special[i] = 0;
  }
  std::vector<ItemId> history_group;
  for (UserId u : targets.users) {
    for (ItemId i : ds.train(u)) {
      if (special[i] == -1) {
        special[i] = 1;
        history_group.push_back(i);
      }
    }
  }
  std::sort(target_group.begin(), target_group.end());
  std::sort(history_group.begin(), history_group.end());

  std::vector<std::vector<ItemId>> groups{std::move(target_group)};
  std::vector<GroupKind> kinds{GroupKind::kTarget};
  if (!history_group.empty()) {
    groups.push_back(std::move(history_group));
    kinds.push_back(GroupKind::kHistory);
  }
  const int max_cluster = assignment.empty() ? -1 : *std::max_element(assignment.begin(), assignment.end());
  std::vector<std::vector<ItemId>> clusters(static_cast<std::size_t>(max_cluster + 1));
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (special[i] != -1) continue;
    if (assignment[i] < 0) {
      throw Error(ErrorCode::kInvalidArgument, "build_groups: item " + std::to_string(i) + " is unassigned");
    }
    clusters[assignment[i]].push_back(static_cast<ItemId>(i));
  }
  for (auto& c : clusters) {
    if (c.empty()) continue;
    groups.push_back(std::move(c));
    kinds.push_back(GroupKind::kCluster);
  }
  return ItemGroups(std::move(groups), std::move(kinds));
}

json GroupConfig::to_json() const {
  return json{{"nmf_rank", nmf_rank},
              {"nmf_iterations", nmf_iterations},
              {"clusters", clusters},
              {"kmeans_iterations", kmeans_iterations}};
}

GroupConfig GroupConfig::from_json(const json& j) {
  GroupConfig c;
  c.nmf_rank = j.value("nmf_rank", c.nmf_rank);
  c.nmf_iterations = j.value("nmf_iterations", c.nmf_iterations);
  c.clusters = j.value("clusters", c.clusters);
  c.kmeans_iterations = j.value("kmeans_iterations", c.kmeans_iterations);
  return c;
}

ItemGroups build_action_space(const Dataset& ds, const TargetSpec& targets, const GroupConfig& cfg,
                              std::uint64_t seed) {
  if (cfg.clusters < 1) throw Error(ErrorCode::kInvalidArgument, "groups: clusters must be >= 1");
  std::vector<bool> special(ds.num_items(), false);
  for (ItemId i : targets.items) special.at(i) = true;
  for (UserId u : targets.users) {
    for (ItemId i : ds.train(u)) special[i] = true;
  }
  std::vector<ItemId> rest;
  for (std::size_t i = 0; i < ds.num_items(); ++i) {
    if (!special[i]) rest.push_back(static_cast<ItemId>(i));
  }
  std::vector<int> assignment(ds.num_items(), -1);
  if (!rest.empty()) {
    const MatrixXd features = nmf_item_features(ds, cfg.nmf_rank, cfg.nmf_iterations, seed);
    MatrixXd points(static_cast<Eigen::Index>(rest.size()), features.cols());
    for (std::size_t k = 0; k < rest.size(); ++k) points.row(static_cast<Eigen::Index>(k)) = features.row(rest[k]);
    const int c = std::min<int>(cfg.clusters, static_cast<int>(rest.size()));
    const auto km = kmeans(points, c, seed, cfg.kmeans_iterations);
    for (std::size_t k = 0; k < rest.size(); ++k) assignment[rest[k]] = km.assignment[k];
    spdlog::info("groups: {} clustered items, wcss {:.4g} after {} iterations", rest.size(), km.wcss,
                 km.iterations);
  }
  return build_groups(ds, targets, assignment);
}

}  // namespace poisonforge
