#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poisonforge/data.hpp"

namespace pftest {

using poisonforge::Dataset;
using poisonforge::ItemId;

// Dataset straight from item-index sequences. holdout=true keeps the last two items out of training.
inline Dataset make_dataset(const std::vector<std::vector<ItemId>>& seqs, std::size_t items, bool holdout = false) {
  std::vector<std::string> users, names;
  for (std::size_t u = 0; u < seqs.size(); ++u) users.push_back("u" + std::to_string(u));
  for (std::size_t i = 0; i < items; ++i) names.push_back("i" + std::to_string(i));
  std::vector<std::uint8_t> hold(seqs.size(), holdout ? 2 : 0);
  return Dataset(users, names, seqs, hold);
}

inline double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double denom = std::max(b.norm(), 1e-12);
  return (a - b).norm() / denom;
}

// Central differences of a scalar function at x.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    y[k] = x[k] + h;
    const double up = f(y);
    y[k] = x[k] - h;
    const double down = f(y);
    y[k] = x[k];
    g[k] = (up - down) / (2 * h);
  }
  return g;
}

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Chi-square statistic of observed counts against equal expected counts.
inline double chi_square_uniform(const std::vector<std::size_t>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double expected = total / static_cast<double>(counts.size());
  double chi = 0;
  for (auto c : counts) chi += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return chi;
}

}  // namespace pftest
