#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "poisonforge/influence.hpp"
#include "support.hpp"

using namespace poisonforge;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// L(z; theta) = (theta - z)^2 over a fixed one-parameter state.
class SquaredDistance final : public Objective {
 public:
  SquaredDistance(std::vector<double> data, double theta) : data_(std::move(data)), theta_(theta) {}
  std::size_t param_dim() const override { return 1; }
  std::size_t sample_count() const override { return data_.size(); }
  void add_sample_grad(std::size_t i, double w, VectorXd& out) const override {
    out[0] += w * 2.0 * (theta_ - data_[i]);
  }
  void add_sample_hvp(std::size_t, const VectorXd& v, double w, VectorXd& out) const override {
    out[0] += w * 2.0 * v[0];
  }

 private:
  std::vector<double> data_;
  double theta_;
};

// Minimizer of mean_i (theta - z_i)^2 + eps (theta - z)^2 by golden-section search.
double retrain(const std::vector<double>& data, double z, double eps) {
  auto risk = [&](double t) {
    double r = 0;
    for (double d : data) r += (t - d) * (t - d);
    return r / static_cast<double>(data.size()) + eps * (t - z) * (t - z);
  };
  double a = -10, b = 10;
  const double g = (std::sqrt(5.0) - 1) / 2;
  while (b - a > 1e-12) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (risk(c) < risk(d)) b = d;
    else a = c;
  }
  return (a + b) / 2;
}

LissaConfig exact_lissa(double scale, double damping, int depth = 3000) {
  LissaConfig cfg;
  cfg.depth = depth;
  cfg.scale = scale;
  cfg.repeats = 1;
  cfg.damping = damping;
  cfg.batch = 1 << 30;
  return cfg;
}

MatrixXd dense_hessian(const Objective& obj, double damping) {
  const auto n = static_cast<Eigen::Index>(obj.param_dim());
  MatrixXd h(n, n);
  for (Eigen::Index k = 0; k < n; ++k) h.col(k) = hvp(obj, VectorXd::Unit(n, k), damping);
  return h;
}

Dataset tiny_dataset() {
  SyntheticConfig sc;
  sc.users = 30;
  sc.items = 20;
  sc.topics = 3;
  sc.seed = 2;
  return build_dataset(synthesize_log(sc));
}

ModelHyper tiny_hyper() {
  ModelHyper h;
  h.dim = 2;
  h.epochs = 30;
  h.eval_users = 0;
  return h;
}

}  // namespace

TEST_CASE("one-parameter influence matches the closed-form retrain derivative") {
  const std::vector<double> data{0.0, 2.0};
  SquaredDistance obj(data, 1.0);
  VectorXd test_grad(1), sample_grad(1);
  test_grad << 1.0;          // f_test = theta
  sample_grad << 2.0 * (1.0 - 3.0);  // z_delta = 3
  const double influence = score_influence(obj, test_grad, sample_grad, exact_lissa(4.0, 0.0, 200));
  CHECK(influence == doctest::Approx(2.0).epsilon(1e-9));

  const double h = 1e-4;
  const double numeric = (retrain(data, 3.0, h) - retrain(data, 3.0, -h)) / (2 * h);
  CHECK(numeric == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("lissa matches a dense damped solve") {
  auto ds = tiny_dataset();
  auto model = train_model(ModelKind::kBprmf, ds, tiny_hyper(), 3);
  RecommenderObjective obj(*model, training_samples(*model, ds, 1));
  const double damping = 0.1;
  const MatrixXd h = dense_hessian(obj, damping);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(h);
  REQUIRE(eig.eigenvalues().minCoeff() > 0);
  const double top = eig.eigenvalues().maxCoeff();

  VectorXd v = model->score_grad(0, ds.train(0), 5);
  const VectorXd exact = h.ldlt().solve(v);

  SUBCASE("full-batch recursion") {
    const VectorXd approx = inverse_hvp(obj, v, exact_lissa(1.2 * top, damping, 4000));
    CHECK(pftest::rel_error(approx, exact) <= 0.01);
  }
  SUBCASE("stochastic batches") {
    LissaConfig cfg = exact_lissa(1.2 * top, damping, 3000);
    cfg.batch = 64;
    cfg.repeats = 8;
    const VectorXd approx = inverse_hvp(obj, v, cfg);
    CHECK(pftest::rel_error(approx, exact) <= 0.1);
  }
}

TEST_CASE("lissa edge cases") {
  SquaredDistance obj({0.0, 2.0}, 1.0);
  CHECK(inverse_hvp(obj, VectorXd::Zero(1), exact_lissa(4.0, 0.0)).norm() == 0.0);

  // Scale below the curvature makes the recursion blow up.
  try {
    inverse_hvp(obj, VectorXd::Ones(1), exact_lissa(0.5, 0.0));
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
  }

  LissaConfig bad;
  bad.depth = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(inverse_hvp(obj, VectorXd::Ones(3), exact_lissa(4.0, 0.0)), Error);

  VectorXd g(1);
  g << 1.0;
  CHECK(score_influence(obj, g, VectorXd::Zero(1), exact_lissa(4.0, 0.0)) == 0.0);
}

TEST_CASE("estimator agrees with the one-shot influence") {
  auto ds = tiny_dataset();
  auto model = train_model(ModelKind::kFpmc, ds, tiny_hyper(), 5);
  Ensemble ens{{std::shared_ptr<const Recommender>(model->clone())}, {1.0}};
  TargetSpec spec{{3}, {0}};
  auto targets = target_samples(ds, spec);
  auto cfg = exact_lissa(20.0, 0.1, 2000);
  InfluenceEstimator est(ens, ds, targets, cfg, 4);

  RecommenderObjective obj(*model, training_samples(*model, ds, 4));
  auto samples = training_samples(*model, ds, 11);
  for (std::size_t k = 0; k < 10; ++k) {
    const auto& z = samples[k * 7];
    const double direct = score_influence(*model, obj, z, targets[0], cfg);
    CHECK(est.sample_influence(0, z) == doctest::Approx(direct).epsilon(1e-6));
  }
}

TEST_CASE("influence is additive over samples") {
  auto ds = tiny_dataset();
  auto model = train_model(ModelKind::kBprmf, ds, tiny_hyper(), 5);
  Ensemble ens{{std::shared_ptr<const Recommender>(model->clone())}, {1.0}};
  InfluenceEstimator est(ens, ds, target_samples(ds, TargetSpec{{2, 9}, {0, 1}}), exact_lissa(20.0, 0.1, 500));
  auto samples = training_samples(*model, ds, 3);
  samples.resize(12);
  double sum = 0;
  for (const auto& z : samples) sum += est.sample_influence(0, z);
  CHECK(est.member_influence(0, samples) == doctest::Approx(sum));
  CHECK(est.member_influence(0, {}) == 0.0);
}

TEST_CASE("pushing the target item up for the target user helps") {
  auto ds = tiny_dataset();
  auto model = train_model(ModelKind::kBprmf, ds, tiny_hyper(), 6);
  Ensemble ens{{std::shared_ptr<const Recommender>(model->clone())}, {1.0}};
  auto spec = select_targets(ds, 1, 1, 3);
  InfluenceEstimator est(ens, ds, target_samples(ds, spec), exact_lissa(20.0, 0.1, 1000));
  const UserId u = spec.users[0];
  const ItemId t = spec.items[0];
  const ItemId other = t == 0 ? 1 : 0;
  CHECK(est.sample_influence(0, TrainingSample::pair(u, t, other)) > 0);
  CHECK(est.sample_influence(0, TrainingSample::pair(u, other, t)) < 0);
}

TEST_CASE("empty target set is rejected") {
  auto ds = tiny_dataset();
  Ensemble ens{{std::shared_ptr<const Recommender>(make_model(ModelKind::kBprmf, ds.num_users(),
                                                              ds.num_items(), tiny_hyper(), 1))},
               {1.0}};
  CHECK_THROWS_AS(InfluenceEstimator(ens, ds, {}, LissaConfig{}), Error);
}

TEST_CASE("controlled samples") {
  auto ds = tiny_dataset();
  auto bpr = train_model(ModelKind::kBprmf, ds, tiny_hyper(), 2);
  auto fpmc = train_model(ModelKind::kFpmc, ds, tiny_hyper(), 2);
  std::vector<ItemId> seq{4, 1, 7, 2};

  auto a = controlled_samples(*bpr, seq, 9, 0);
  REQUIRE(a.size() == 4);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].user == kControlledUser);
    CHECK(a[k].user_vector.has_value());
    // Negatives avoid the items chosen up to that position.
    CHECK(std::find(seq.begin(), seq.begin() + static_cast<long>(k) + 1, a[k].neg) == seq.begin() + static_cast<long>(k) + 1);
  }
  auto b = controlled_samples(*bpr, seq, 9, 0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].neg == b[k].neg);
    CHECK(*a[k].user_vector == *b[k].user_vector);
  }
  auto tail = controlled_samples(*bpr, seq, 9, 0, 3);
  REQUIRE(tail.size() == 1);
  CHECK(tail[0].pos == 2);

  auto f = controlled_samples(*fpmc, seq, 9, 1);
  REQUIRE(f.size() == 3);
  CHECK(f[0].prev == 4);
  CHECK(controlled_samples(*fpmc, seq, 9, 1, 3).size() == 1);
}

TEST_CASE("fold-in vector is a stationary point of the user's own loss") {
  auto ds = tiny_dataset();
  for (auto kind : {ModelKind::kBprmf, ModelKind::kFpmc}) {
    auto model = train_model(kind, ds, tiny_hyper(), 4);
    std::vector<ItemId> seq{3, 8, 1, 12, 5};
    auto samples = controlled_samples(*model, seq, 1, 0);
    for (auto& z : samples) z.user_vector.reset();
    const VectorXd p = model->fold_in_user(samples);
    VectorXd grad = model->hyper().l2_reg * p;
    for (auto z : samples) {
      z.user_vector = p;
      const double x = model->margin(z);
      grad -= model->margin_user_grad(z) / (1.0 + std::exp(x));
    }
    CHECK(grad.norm() <= 1e-6);
  }
}

TEST_CASE("weighted ensemble influence averages the members") {
  auto ds = tiny_dataset();
  auto m0 = std::shared_ptr<const Recommender>(train_model(ModelKind::kBprmf, ds, tiny_hyper(), 1));
  auto m1 = std::shared_ptr<const Recommender>(train_model(ModelKind::kFpmc, ds, tiny_hyper(), 1));
  Ensemble ens{{m0, m1}, {3.0, 1.0}};
  auto targets = target_samples(ds, TargetSpec{{2}, {0}});
  InfluenceEstimator est(ens, ds, targets, exact_lissa(20.0, 0.1, 500));
  std::vector<std::vector<ItemId>> seqs{{2, 5, 6}, {2, 7}};
  double expected = 0;
  for (std::size_t m = 0; m < 2; ++m) {
    double sum = 0;
    for (std::size_t slot = 0; slot < seqs.size(); ++slot) {
      sum += est.member_influence(m, controlled_samples(*ens.members[m], seqs[slot], 0, slot));
    }
    expected += ens.weights[m] * sum;
  }
  CHECK(est.sequence_influence(seqs) == doctest::Approx(expected / 4.0));

  // Step influences over a growing sequence add up to the whole.
  double steps = 0;
  for (std::size_t n = 1; n <= seqs[0].size(); ++n) {
    steps += est.step_influence(0, std::span<const ItemId>(seqs[0]).first(n));
  }
  std::vector<std::vector<ItemId>> one{seqs[0]};
  CHECK(steps == doctest::Approx(est.sequence_influence(one)));
}
