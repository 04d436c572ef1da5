#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <json.hpp>

#include "poisonforge/data.hpp"

namespace poisonforge {

struct NmfResult {
  Eigen::MatrixXd user_factors;  // |U| x r
  Eigen::MatrixXd item_factors;  // |V| x r
  std::vector<double> error;     // squared Frobenius reconstruction error after each iteration
};

/// Multiplicative-update NMF, X ~= W H^T. Throws ErrorCode::kNumeric on a non-finite factor.
NmfResult nmf(const Eigen::SparseMatrix<double>& x, int rank, int iterations, std::uint64_t seed);

/// Binary user x item matrix of training interactions.
Eigen::SparseMatrix<double> interaction_matrix(const Dataset& ds);

/// Item factors of nmf(interaction_matrix(ds)).
Eigen::MatrixXd nmf_item_features(const Dataset& ds, int rank, int iterations, std::uint64_t seed);

struct KMeansResult {
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;  // c x dim
  double wcss = 0.0;
  int iterations = 0;
};

/// Lloyd's algorithm on the rows of `points` with k-means++ seeding. An emptied cluster is
/// reseeded with the point farthest from its centroid.
KMeansResult kmeans(const Eigen::MatrixXd& points, int clusters, std::uint64_t seed, int max_iters = 100);

/// Within-cluster sum of squared distances to each cluster's mean.
double wcss(const Eigen::MatrixXd& points, std::span<const int> assignment, int clusters);

enum class GroupKind { kTarget, kHistory, kCluster };

std::string_view to_string(GroupKind kind);

struct SampledItem {
  ItemId item = kNoItem;
  int group = 0;          // group the item was drawn from
  bool fallback = false;  // the requested group was exhausted
};

/// The agent's action space. Group 0 holds the target items, group 1 (if non-empty) the items
/// in target users' training histories, and the remaining groups partition the rest of the catalog.
class ItemGroups {
 public:
  ItemGroups() = default;
  ItemGroups(std::vector<std::vector<ItemId>> groups, std::vector<GroupKind> kinds);

  std::size_t size() const { return groups_.size(); }
  std::span<const ItemId> group(int g) const { return groups_.at(static_cast<std::size_t>(g)); }
  GroupKind kind(int g) const { return kinds_.at(static_cast<std::size_t>(g)); }
  const std::vector<std::vector<ItemId>>& groups() const { return groups_; }
  /// Group holding item i, or -1.
  int group_of(ItemId i) const;

  /// Uniform draw from group g minus `forbidden`; when that is empty, from a uniformly chosen
  /// non-exhausted group. Throws ErrorCode::kEmpty when every group is exhausted.
  SampledItem sample_item(int g, std::span<const ItemId> forbidden, Rng& rng) const;

  nlohmann::json to_json() const;
  static ItemGroups from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ItemGroups load(const std::filesystem::path& path);

  friend bool operator==(const ItemGroups& a, const ItemGroups& b) {
    return a.groups_ == b.groups_ && a.kinds_ == b.kinds_;
  }

 private:
  std::vector<std::vector<ItemId>> groups_;
  std::vector<GroupKind> kinds_;
  std::vector<int> item_group_;
};

/// Assembles groups from a cluster assignment over the full catalog. Special-group membership
/// overrides the assignment; empty clusters are dropped. Throws ErrorCode::kEmpty without targets.
ItemGroups build_groups(const Dataset& ds, const TargetSpec& targets, std::span<const int> assignment);

struct GroupConfig {
  int nmf_rank = 16;
  int nmf_iterations = 200;
  int clusters = 8;
  int kmeans_iterations = 100;

  nlohmann::json to_json() const;
  static GroupConfig from_json(const nlohmann::json& j);
};

/// NMF features, k-means over the non-special items, then build_groups.
ItemGroups build_action_space(const Dataset& ds, const TargetSpec& targets, const GroupConfig& cfg,
                              std::uint64_t seed);

}  // namespace poisonforge
