#include "poisonforge/recmodels.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

namespace poisonforge {

using Eigen::VectorXd;
using nlohmann::json;

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kBprmf: return "bprmf";
    case ModelKind::kFpmc: return "fpmc";
  }
  return "?";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "bprmf") return ModelKind::kBprmf;
  if (name == "fpmc") return ModelKind::kFpmc;
  throw Error(ErrorCode::kInvalidArgument, "unknown model kind '" + std::string(name) + "'");
}

json ModelHyper::to_json() const {
  return json{{"dim", dim},       {"learning_rate", learning_rate}, {"l2_reg", l2_reg},
              {"epochs", epochs}, {"neg_samples", neg_samples},     {"eval_users", eval_users}};
}

ModelHyper ModelHyper::from_json(const json& j) { return from_json(j, ModelHyper{}); }

ModelHyper ModelHyper::from_json(const json& j, ModelHyper d) {
  d.dim = j.value("dim", d.dim);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.l2_reg = j.value("l2_reg", d.l2_reg);
  d.epochs = j.value("epochs", d.epochs);
  d.neg_samples = j.value("neg_samples", d.neg_samples);
  d.eval_users = j.value("eval_users", d.eval_users);
  return d;
}

// ---------------------------------------------------------------------------
// Recommender

Recommender::Recommender(ModelKind kind, std::size_t users, std::size_t items, ModelHyper hyper,
                         std::uint64_t seed, std::size_t param_dim)
    : kind_(kind), users_(users), items_(items), hyper_(hyper), seed_(seed),
      params_(VectorXd::Zero(static_cast<Eigen::Index>(param_dim))) {
  if (hyper_.dim < 1) throw Error(ErrorCode::kInvalidArgument, "model dim must be >= 1");
  if (hyper_.epochs < 0) throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 0");
  if (hyper_.neg_samples < 1) throw Error(ErrorCode::kInvalidArgument, "neg_samples must be >= 1");
}

double Recommender::l2_per_sample() const {
  return hyper_.l2_reg / static_cast<double>(std::max<std::size_t>(sample_count_, 1));
}

VectorXd Recommender::user_vector(const TrainingSample& z, std::size_t user_offset) const {
  if (z.user == kControlledUser) {
    return z.user_vector ? *z.user_vector : VectorXd::Zero(dim());
  }
  return params_.segment(static_cast<Eigen::Index>(user_offset), dim());
}

double Recommender::sample_loss(const TrainingSample& z) const {
  return -log_sigmoid(margin(z)) + 0.5 * l2_per_sample() * params_.squaredNorm();
}

void Recommender::add_ranking_grad(const TrainingSample& z, double w, VectorXd& out) const {
  add_margin_grad(z, -w * sigmoid(-margin(z)), out);
}

void Recommender::add_ranking_hvp(const TrainingSample& z, const VectorXd& v, double w,
                                  VectorXd& out) const {
  const double x = margin(z);
  const double s_pos = sigmoid(x), s_neg = sigmoid(-x);
  add_margin_grad(z, w * s_pos * s_neg * margin_dot(z, v), out);
  add_margin_hvp(z, v, -w * s_neg, out);
}

void Recommender::add_loss_grad(const TrainingSample& z, double w, VectorXd& out) const {
  add_ranking_grad(z, w, out);
  out += (w * l2_per_sample()) * params_;
}

VectorXd Recommender::loss_grad(const TrainingSample& z) const {
  VectorXd g = VectorXd::Zero(params_.size());
  add_loss_grad(z, 1.0, g);
  return g;
}

void Recommender::add_loss_hvp(const TrainingSample& z, const VectorXd& v, double w,
                               VectorXd& out) const {
  add_ranking_hvp(z, v, w, out);
  out += (w * l2_per_sample()) * v;
}

VectorXd Recommender::score_grad(UserId u, std::span<const ItemId> history, ItemId i) const {
  VectorXd g = VectorXd::Zero(params_.size());
  add_score_grad(u, history, i, 1.0, g);
  return g;
}

double Recommender::mean_user_norm() const {
  if (users_ == 0) return 0.0;
  double total = 0.0;
  for (std::size_t u = 0; u < users_; ++u) {
    total += params_.segment(static_cast<Eigen::Index>(u * dim()), dim()).norm();
  }
  return total / static_cast<double>(users_);
}

VectorXd Recommender::fold_in_user(std::span<const TrainingSample> samples) const {
  // Margins are affine in the user vector: x_j = a_j + g_j . p.
  const int d = dim();
  std::vector<double> a;
  std::vector<VectorXd> g;
  for (const auto& z : samples) {
    TrainingSample at_zero = z;
    at_zero.user = kControlledUser;
    at_zero.user_vector.reset();
    a.push_back(margin(at_zero));
    g.push_back(margin_user_grad(at_zero));
  }
  const double lambda = std::max(hyper_.l2_reg, 1e-6);
  VectorXd p = VectorXd::Zero(d);
  for (int it = 0; it < 20; ++it) {
    VectorXd grad = lambda * p;
    Eigen::MatrixXd hess = lambda * Eigen::MatrixXd::Identity(d, d);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const double x = a[j] + g[j].dot(p);
      const double sp = sigmoid(x);
      grad -= (1.0 - sp) * g[j];
      hess.selfadjointView<Eigen::Lower>().rankUpdate(g[j], sp * (1.0 - sp));
    }
    const VectorXd step = hess.selfadjointView<Eigen::Lower>().llt().solve(grad);
    p -= step;
    if (step.norm() <= 1e-10 * (1.0 + p.norm())) break;
  }
  return p;
}

json Recommender::to_json() const {
  json layout = kind_ == ModelKind::kBprmf
                    ? json::array({"P[users x dim]", "Q[items x dim]", "b[items]"})
                    : json::array({"VUI[users x dim]", "VIU[items x dim]", "VIL[items x dim]",
                                   "VLI[items x dim]"});
  return json{{"version", kCheckpointVersion},
              {"kind", to_string(kind_)},
              {"hyper", hyper_.to_json()},
              {"seed", seed_},
              {"users", users_},
              {"items", items_},
              {"sample_count", sample_count_},
              {"layout", layout},
              {"params", std::vector<double>(params_.data(), params_.data() + params_.size())}};
}

std::unique_ptr<Recommender> Recommender::from_json(const json& j) {
  if (j.value("version", 0) != kCheckpointVersion) {
    throw Error(ErrorCode::kParse, "model checkpoint: unsupported version");
  }
  auto model = make_model(parse_model_kind(j.at("kind").get<std::string>()),
                          j.at("users").get<std::size_t>(), j.at("items").get<std::size_t>(),
                          ModelHyper::from_json(j.at("hyper")), j.at("seed").get<std::uint64_t>());
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != model->param_dim()) {
    throw Error(ErrorCode::kParse, "model checkpoint: parameter count mismatch");
  }
  model->params_ = Eigen::Map<const VectorXd>(params.data(), static_cast<Eigen::Index>(params.size()));
  model->sample_count_ = j.at("sample_count").get<std::size_t>();
  return model;
}

void Recommender::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

std::unique_ptr<Recommender> Recommender::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// BPRMF

BprmfModel::BprmfModel(std::size_t users, std::size_t items, ModelHyper hyper, std::uint64_t seed)
    : Recommender(ModelKind::kBprmf, users, items, hyper, seed,
                  (users + items) * static_cast<std::size_t>(hyper.dim) + items) {}

std::unique_ptr<Recommender> BprmfModel::clone() const { return std::make_unique<BprmfModel>(*this); }

void BprmfModel::check(const TrainingSample& z) const {
  if (z.kind != TrainingSample::Kind::kPair) {
    throw Error(ErrorCode::kInvalidArgument, "bprmf expects pair samples");
  }
  if (z.pos == z.neg) throw Error(ErrorCode::kInvalidArgument, "sample positive equals negative");
}

double BprmfModel::score(UserId u, std::span<const ItemId>, ItemId i) const {
  const int d = dim();
  return params_.segment(user_offset(u), d).dot(params_.segment(item_offset(i), d)) +
         params_[bias_offset(i)];
}

void BprmfModel::score_all(UserId u, std::span<const ItemId>, std::span<double> out) const {
  const int d = dim();
  const auto p = params_.segment(user_offset(u), d);
  for (std::size_t i = 0; i < items_; ++i) {
    const auto ii = static_cast<ItemId>(i);
    out[i] = p.dot(params_.segment(item_offset(ii), d)) + params_[bias_offset(ii)];
  }
}

void BprmfModel::add_score_grad(UserId u, std::span<const ItemId>, ItemId i, double w,
                                VectorXd& out) const {
  const int d = dim();
  out.segment(user_offset(u), d) += w * params_.segment(item_offset(i), d);
  out.segment(item_offset(i), d) += w * params_.segment(user_offset(u), d);
  out[bias_offset(i)] += w;
}

double BprmfModel::margin(const TrainingSample& z) const {
  check(z);
  const int d = dim();
  const VectorXd p = user_vector(z, user_offset(std::max(z.user, 0)));
  return p.dot(params_.segment(item_offset(z.pos), d) - params_.segment(item_offset(z.neg), d)) +
         params_[bias_offset(z.pos)] - params_[bias_offset(z.neg)];
}

void BprmfModel::add_margin_grad(const TrainingSample& z, double w, VectorXd& out) const {
  check(z);
  const int d = dim();
  const VectorXd p = user_vector(z, user_offset(std::max(z.user, 0)));
  if (z.user != kControlledUser) {
    out.segment(user_offset(z.user), d) +=
        w * (params_.segment(item_offset(z.pos), d) - params_.segment(item_offset(z.neg), d));
  }
  out.segment(item_offset(z.pos), d) += w * p;
  out.segment(item_offset(z.neg), d) -= w * p;
  out[bias_offset(z.pos)] += w;
  out[bias_offset(z.neg)] -= w;
}

void BprmfModel::add_margin_hvp(const TrainingSample& z, const VectorXd& v, double w,
                                VectorXd& out) const {
  check(z);
  if (z.user == kControlledUser) return;  // margin is linear in the item parameters
  const int d = dim();
  const auto vp = v.segment(user_offset(z.user), d);
  out.segment(user_offset(z.user), d) +=
      w * (v.segment(item_offset(z.pos), d) - v.segment(item_offset(z.neg), d));
  out.segment(item_offset(z.pos), d) += w * vp;
  out.segment(item_offset(z.neg), d) -= w * vp;
}

double BprmfModel::margin_dot(const TrainingSample& z, const VectorXd& v) const {
  check(z);
  const int d = dim();
  const VectorXd p = user_vector(z, user_offset(std::max(z.user, 0)));
  double s = p.dot(v.segment(item_offset(z.pos), d) - v.segment(item_offset(z.neg), d)) +
             v[bias_offset(z.pos)] - v[bias_offset(z.neg)];
  if (z.user != kControlledUser) {
    s += v.segment(user_offset(z.user), d)
             .dot(params_.segment(item_offset(z.pos), d) - params_.segment(item_offset(z.neg), d));
  }
  return s;
}

VectorXd BprmfModel::margin_user_grad(const TrainingSample& z) const {
  check(z);
  const int d = dim();
  return params_.segment(item_offset(z.pos), d) - params_.segment(item_offset(z.neg), d);
}

std::vector<TrainingSample> BprmfModel::decompose(UserId u, std::span<const ItemId> seq,
                                                  const NegativeSampler& negative) const {
  std::vector<TrainingSample> out;
  out.reserve(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    out.push_back(TrainingSample::pair(u, seq[t], negative(t, seq[t])));
  }
  return out;
}

void BprmfModel::sgd_step(const TrainingSample& z, double lr) {
  const int d = dim();
  const double g = lr * sigmoid(-margin(z));
  const VectorXd p = params_.segment(user_offset(z.user), d);
  const VectorXd qp = params_.segment(item_offset(z.pos), d);
  const VectorXd qn = params_.segment(item_offset(z.neg), d);
  params_.segment(user_offset(z.user), d) += g * (qp - qn);
  params_.segment(item_offset(z.pos), d) += g * p;
  params_.segment(item_offset(z.neg), d) -= g * p;
  params_[bias_offset(z.pos)] += g;
  params_[bias_offset(z.neg)] -= g;
}

// ---------------------------------------------------------------------------
// FPMC

FpmcModel::FpmcModel(std::size_t users, std::size_t items, ModelHyper hyper, std::uint64_t seed)
    : Recommender(ModelKind::kFpmc, users, items, hyper, seed,
                  (users + 3 * items) * static_cast<std::size_t>(hyper.dim)) {}

std::unique_ptr<Recommender> FpmcModel::clone() const { return std::make_unique<FpmcModel>(*this); }

void FpmcModel::check(const TrainingSample& z) const {
  if (z.kind != TrainingSample::Kind::kSeq) {
    throw Error(ErrorCode::kInvalidArgument, "fpmc expects sequence samples");
  }
  if (z.pos == z.neg) throw Error(ErrorCode::kInvalidArgument, "sample positive equals negative");
}

double FpmcModel::score(UserId u, std::span<const ItemId> history, ItemId i) const {
  const int d = dim();
  double s = 0.0;
  if (u != kControlledUser) {
    s += params_.segment(vui_offset(u), d).dot(params_.segment(viu_offset(i), d));
  }
  if (!history.empty()) {
    s += params_.segment(vil_offset(i), d).dot(params_.segment(vli_offset(history.back()), d));
  }
  return s;
}

void FpmcModel::score_all(UserId u, std::span<const ItemId> history, std::span<double> out) const {
  const int d = dim();
  const VectorXd user = u != kControlledUser ? VectorXd(params_.segment(vui_offset(u), d))
                                             : VectorXd::Zero(d);
  const VectorXd last = history.empty() ? VectorXd::Zero(d)
                                        : VectorXd(params_.segment(vli_offset(history.back()), d));
  for (std::size_t i = 0; i < items_; ++i) {
    const auto ii = static_cast<ItemId>(i);
    out[i] = user.dot(params_.segment(viu_offset(ii), d)) + last.dot(params_.segment(vil_offset(ii), d));
  }
}

void FpmcModel::add_score_grad(UserId u, std::span<const ItemId> history, ItemId i, double w,
                               VectorXd& out) const {
  const int d = dim();
  if (u != kControlledUser) {
    out.segment(vui_offset(u), d) += w * params_.segment(viu_offset(i), d);
    out.segment(viu_offset(i), d) += w * params_.segment(vui_offset(u), d);
  }
  if (!history.empty()) {
    const ItemId l = history.back();
    out.segment(vil_offset(i), d) += w * params_.segment(vli_offset(l), d);
    out.segment(vli_offset(l), d) += w * params_.segment(vil_offset(i), d);
  }
}

double FpmcModel::margin(const TrainingSample& z) const {
  check(z);
  const int d = dim();
  const VectorXd u = user_vector(z, vui_offset(std::max(z.user, 0)));
  double x = u.dot(params_.segment(viu_offset(z.pos), d) - params_.segment(viu_offset(z.neg), d));
  if (z.prev != kNoItem) {
    x += params_.segment(vli_offset(z.prev), d)
             .dot(params_.segment(vil_offset(z.pos), d) - params_.segment(vil_offset(z.neg), d));
  }
  return x;
}

void FpmcModel::add_margin_grad(const TrainingSample& z, double w, VectorXd& out) const {
  check(z);
  const int d = dim();
  const VectorXd u = user_vector(z, vui_offset(std::max(z.user, 0)));
  if (z.user != kControlledUser) {
    out.segment(vui_offset(z.user), d) +=
        w * (params_.segment(viu_offset(z.pos), d) - params_.segment(viu_offset(z.neg), d));
  }
  out.segment(viu_offset(z.pos), d) += w * u;
  out.segment(viu_offset(z.neg), d) -= w * u;
  if (z.prev != kNoItem) {
    const VectorXd l = params_.segment(vli_offset(z.prev), d);
    out.segment(vli_offset(z.prev), d) +=
        w * (params_.segment(vil_offset(z.pos), d) - params_.segment(vil_offset(z.neg), d));
    out.segment(vil_offset(z.pos), d) += w * l;
    out.segment(vil_offset(z.neg), d) -= w * l;
  }
}

void FpmcModel::add_margin_hvp(const TrainingSample& z, const VectorXd& v, double w,
                               VectorXd& out) const {
  check(z);
  const int d = dim();
  if (z.user != kControlledUser) {
    const VectorXd vu = v.segment(vui_offset(z.user), d);
    out.segment(vui_offset(z.user), d) +=
        w * (v.segment(viu_offset(z.pos), d) - v.segment(viu_offset(z.neg), d));
    out.segment(viu_offset(z.pos), d) += w * vu;
    out.segment(viu_offset(z.neg), d) -= w * vu;
  }
  if (z.prev != kNoItem) {
    const VectorXd vl = v.segment(vli_offset(z.prev), d);
    out.segment(vli_offset(z.prev), d) +=
        w * (v.segment(vil_offset(z.pos), d) - v.segment(vil_offset(z.neg), d));
    out.segment(vil_offset(z.pos), d) += w * vl;
    out.segment(vil_offset(z.neg), d) -= w * vl;
  }
}

double FpmcModel::margin_dot(const TrainingSample& z, const VectorXd& v) const {
  check(z);
  const int d = dim();
  const VectorXd u = user_vector(z, vui_offset(std::max(z.user, 0)));
  double s = u.dot(v.segment(viu_offset(z.pos), d) - v.segment(viu_offset(z.neg), d));
  if (z.user != kControlledUser) {
    s += v.segment(vui_offset(z.user), d)
             .dot(params_.segment(viu_offset(z.pos), d) - params_.segment(viu_offset(z.neg), d));
  }
  if (z.prev != kNoItem) {
    s += v.segment(vli_offset(z.prev), d)
             .dot(params_.segment(vil_offset(z.pos), d) - params_.segment(vil_offset(z.neg), d));
    s += params_.segment(vli_offset(z.prev), d)
             .dot(v.segment(vil_offset(z.pos), d) - v.segment(vil_offset(z.neg), d));
  }
  return s;
}

VectorXd FpmcModel::margin_user_grad(const TrainingSample& z) const {
  check(z);
  const int d = dim();
  return params_.segment(viu_offset(z.pos), d) - params_.segment(viu_offset(z.neg), d);
}

std::vector<TrainingSample> FpmcModel::decompose(UserId u, std::span<const ItemId> seq,
                                                 const NegativeSampler& negative) const {
  std::vector<TrainingSample> out;
  if (seq.size() < 2) return out;
  out.reserve(seq.size() - 1);
  for (std::size_t t = 1; t < seq.size(); ++t) {
    out.push_back(TrainingSample::seq(u, seq[t - 1], seq[t], negative(t, seq[t])));
  }
  return out;
}

void FpmcModel::sgd_step(const TrainingSample& z, double lr) {
  const int d = dim();
  const double g = lr * sigmoid(-margin(z));
  const VectorXd u = params_.segment(vui_offset(z.user), d);
  const VectorXd up = params_.segment(viu_offset(z.pos), d);
  const VectorXd un = params_.segment(viu_offset(z.neg), d);
  params_.segment(vui_offset(z.user), d) += g * (up - un);
  params_.segment(viu_offset(z.pos), d) += g * u;
  params_.segment(viu_offset(z.neg), d) -= g * u;
  if (z.prev != kNoItem) {
    const VectorXd l = params_.segment(vli_offset(z.prev), d);
    const VectorXd lp = params_.segment(vil_offset(z.pos), d);
    const VectorXd ln = params_.segment(vil_offset(z.neg), d);
    params_.segment(vli_offset(z.prev), d) += g * (lp - ln);
    params_.segment(vil_offset(z.pos), d) += g * l;
    params_.segment(vil_offset(z.neg), d) -= g * l;
  }
}

// ---------------------------------------------------------------------------
// Training

std::unique_ptr<Recommender> make_model(ModelKind kind, std::size_t users, std::size_t items,
                                        const ModelHyper& hyper, std::uint64_t seed) {
  std::unique_ptr<Recommender> model;
  if (kind == ModelKind::kBprmf) {
    model = std::make_unique<BprmfModel>(users, items, hyper, seed);
  } else {
    model = std::make_unique<FpmcModel>(users, items, hyper, seed);
  }
  Rng rng(derive_seed(seed, "init"));
  const double bound = 0.1 / std::sqrt(static_cast<double>(hyper.dim));
  std::uniform_real_distribution<double> init(-bound, bound);
  for (auto& p : model->mutable_parameters()) p = init(rng);
  return model;
}

namespace {

ItemId sample_negative(const Dataset& ds, UserId u, std::size_t n_items, Rng& rng) {
  std::uniform_int_distribution<ItemId> pick(0, static_cast<ItemId>(n_items) - 1);
  for (int tries = 0; tries < 1000; ++tries) {
    const ItemId i = pick(rng);
    if (!ds.in_train(u, i)) return i;
  }
  std::vector<ItemId> free;
  for (std::size_t i = 0; i < n_items; ++i) {
    if (!ds.in_train(u, static_cast<ItemId>(i))) free.push_back(static_cast<ItemId>(i));
  }
  if (free.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "user " + ds.user_name(u) + " consumed every item");
  }
  return free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
}

std::vector<TrainingSample> draw_samples(const Recommender& model, const Dataset& ds, Rng& rng) {
  std::vector<TrainingSample> samples;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto uid = static_cast<UserId>(u);
    for (int k = 0; k < model.hyper().neg_samples; ++k) {
      auto part = model.decompose(uid, ds.train(uid), [&](std::size_t, ItemId) {
        return sample_negative(ds, uid, ds.num_items(), rng);
      });
      samples.insert(samples.end(), part.begin(), part.end());
    }
  }
  return samples;
}

}  // namespace

std::vector<TrainingSample> training_samples(const Recommender& model, const Dataset& ds,
                                             std::uint64_t neg_seed) {
  Rng rng(derive_seed(neg_seed, "negatives"));
  return draw_samples(model, ds, rng);
}

void fit(Recommender& model, const Dataset& ds) {
  if (ds.num_users() != model.num_users() || ds.num_items() != model.num_items()) {
    throw Error(ErrorCode::kInvalidArgument, "model shape does not match dataset");
  }
  Rng rng(derive_seed(model.seed(), "sgd"));
  const auto& hp = model.hyper();
  model.log_.clear();
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    auto samples = draw_samples(model, ds, rng);
    if (samples.empty()) throw Error(ErrorCode::kEmpty, "no training samples");
    model.set_sample_count(samples.size());
    std::shuffle(samples.begin(), samples.end(), rng);
    double loss = 0.0;
    for (const auto& z : samples) {
      loss -= log_sigmoid(model.margin(z));
      model.sgd_step(z, hp.learning_rate);
    }
    // N steps of weight decay lr * l2 / N, applied in one pass.
    const double n = static_cast<double>(samples.size());
    model.params_ *= std::pow(1.0 - hp.learning_rate * hp.l2_reg / n, n);
    loss += 0.5 * hp.l2_reg * model.params_.squaredNorm();
    if (!std::isfinite(loss) || !model.params_.allFinite()) {
      throw Error(ErrorCode::kNumeric, std::string(to_string(model.kind())) +
                                           " training diverged at epoch " + std::to_string(epoch));
    }
    double hr = 0.0;
    if (hp.eval_users > 0) {
      hr = validation_hit_rate(model, ds, 10, static_cast<std::size_t>(hp.eval_users));
    }
    model.log_.push_back({epoch, loss, hr});
    spdlog::debug("{} epoch {} loss {:.4f} val HR@10 {:.4f}", to_string(model.kind()), epoch, loss, hr);
  }
  if (hp.epochs == 0) {
    std::size_t n = 0;
    for (std::size_t u = 0; u < ds.num_users(); ++u) {
      const auto len = ds.train(static_cast<UserId>(u)).size();
      n += model.kind() == ModelKind::kBprmf ? len : (len > 0 ? len - 1 : 0);
    }
    model.set_sample_count(std::max<std::size_t>(n * static_cast<std::size_t>(hp.neg_samples), 1));
  }
}

std::unique_ptr<Recommender> train_model(ModelKind kind, const Dataset& ds, const ModelHyper& hyper,
                                         std::uint64_t seed) {
  auto model = make_model(kind, ds.num_users(), ds.num_items(), hyper, seed);
  fit(*model, ds);
  return model;
}

std::unique_ptr<Recommender> train_bprmf(const Dataset& ds, const ModelHyper& hyper, std::uint64_t seed) {
  return train_model(ModelKind::kBprmf, ds, hyper, seed);
}

std::unique_ptr<Recommender> train_fpmc(const Dataset& ds, const ModelHyper& hyper, std::uint64_t seed) {
  return train_model(ModelKind::kFpmc, ds, hyper, seed);
}

double validation_hit_rate(const Recommender& model, const Dataset& ds, std::size_t k,
                           std::size_t max_users) {
  std::vector<double> scores(ds.num_items());
  std::size_t users = 0, hits = 0;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto uid = static_cast<UserId>(u);
    if (!ds.has_holdout(uid)) continue;
    if (max_users > 0 && users >= max_users) break;
    ++users;
    const auto hist = ds.train(uid);
    model.score_all(uid, hist, scores);
    const auto top = top_k_from_scores(scores, k, hist);
    hits += std::find(top.items.begin(), top.items.end(), ds.validation(uid)) != top.items.end();
  }
  return users == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(users);
}

// ---------------------------------------------------------------------------
// Ranking

TopK top_k_from_scores(std::span<const double> scores, std::size_t k,
                       std::span<const ItemId> excluded) {
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, "top_k: k must be >= 1");
  std::vector<char> skip(scores.size(), 0);
  for (ItemId i : excluded) {
    if (i >= 0 && static_cast<std::size_t>(i) < scores.size()) skip[i] = 1;
  }
  std::vector<ItemId> eligible;
  eligible.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!skip[i]) eligible.push_back(static_cast<ItemId>(i));
  }
  auto better = [&](ItemId a, ItemId b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  TopK out;
  out.truncated = eligible.size() < k;
  const auto n = std::min(k, eligible.size());
  std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n), eligible.end(), better);
  out.items.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

TopK top_k(const Recommender& model, UserId u, std::span<const ItemId> history, std::size_t k,
           bool exclude_history) {
  std::vector<double> scores(model.num_items());
  model.score_all(u, history, scores);
  return top_k_from_scores(scores, k, exclude_history ? history : std::span<const ItemId>{});
}

// ---------------------------------------------------------------------------
// Objective

RecommenderObjective::RecommenderObjective(const Recommender& model,
                                           std::vector<TrainingSample> samples)
    : model_(model), samples_(std::move(samples)) {}

void RecommenderObjective::add_sample_grad(std::size_t i, double w, VectorXd& out) const {
  model_.add_ranking_grad(samples_[i], w, out);
}

void RecommenderObjective::add_sample_hvp(std::size_t i, const VectorXd& v, double w,
                                          VectorXd& out) const {
  model_.add_ranking_hvp(samples_[i], v, w, out);
}

void RecommenderObjective::add_shared_grad(double w, VectorXd& out) const {
  out += (w * model_.l2_per_sample()) * model_.parameters();
}

VectorXd hvp(const Objective& objective, const VectorXd& v, double damping) {
  if (static_cast<std::size_t>(v.size()) != objective.param_dim()) {
    throw Error(ErrorCode::kInvalidArgument, "hvp: vector size does not match parameter count");
  }
  if (damping < 0) throw Error(ErrorCode::kInvalidArgument, "hvp: damping must be >= 0");
  const std::size_t n = objective.sample_count();
  VectorXd out = (damping + objective.shared_curvature()) * v;
  const double w = 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t i = 0; i < n; ++i) objective.add_sample_hvp(i, v, w, out);
  if (!out.allFinite()) throw Error(ErrorCode::kNumeric, "hvp produced non-finite values");
  return out;
}

VectorXd hvp(const Recommender& model, const Dataset& ds, const VectorXd& v, double damping,
             std::uint64_t neg_seed) {
  RecommenderObjective objective(model, training_samples(model, ds, neg_seed));
  return hvp(objective, v, damping);
}

VectorXd full_gradient(const Objective& objective) {
  const std::size_t n = objective.sample_count();
  VectorXd out = VectorXd::Zero(static_cast<Eigen::Index>(objective.param_dim()));
  const double w = 1.0 / static_cast<double>(std::max<std::size_t>(n, 1));
  for (std::size_t i = 0; i < n; ++i) objective.add_sample_grad(i, w, out);
  objective.add_shared_grad(1.0, out);
  return out;
}

}  // namespace poisonforge
