#include "advdino/survival.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <map>
#include <numeric>

#include "advdino/evalkit.hpp"
#include "advdino/optim.hpp"
#include "advdino/rng.hpp"

namespace advdino::surv {

using nlohmann::json;

namespace {

constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

std::size_t TimeBins::bin_of(double t) const {
  return static_cast<std::size_t>(std::lower_bound(cuts.begin(), cuts.end(), t) - cuts.begin());
}

TimeBins make_time_bins(std::span<const SlideRecord> records, std::size_t n_bins) {
  if (n_bins == 0) throw Error("n_bins must be positive");
  std::vector<double> ev;
  for (const auto& r : records) {
    if (r.event) ev.push_back(r.time);
  }
  if (ev.size() < n_bins) {
    throw Error("time bins need at least " + std::to_string(n_bins) + " events, got " + std::to_string(ev.size()));
  }
  TimeBins b;
  for (std::size_t k = 1; k < n_bins; ++k) b.cuts.push_back(percentile(ev, static_cast<double>(k) / static_cast<double>(n_bins)));
  for (std::size_t k = 1; k < b.cuts.size(); ++k) {
    if (!(b.cuts[k] > b.cuts[k - 1])) throw Error("degenerate time bins: event-time quantiles coincide");
  }
  return b;
}

void AbmilConfig::validate() const {
  if (input_dim == 0 || attention_dim == 0) throw Error("ABMIL dimensions must be positive");
  if (n_bins == 0) throw Error("ABMIL needs at least one time bin");
  if (epochs == 0) throw Error("ABMIL epochs must be positive");
  if (learning_rates.empty()) throw Error("ABMIL needs at least one learning rate");
  for (double lr : learning_rates) {
    if (!(lr > 0.0)) throw Error("ABMIL learning rates must be positive");
  }
  if (weight_decay < 0.0) throw Error("weight_decay must be non-negative");
}

ParamStore init_abmil(const AbmilConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const double d = static_cast<double>(cfg.input_dim), h = static_cast<double>(cfg.attention_dim);
  ParamStore p;
  p["attn.V"] = trunc_normal({cfg.input_dim, cfg.attention_dim}, 1.0 / std::sqrt(d), rng);
  p["attn.w"] = trunc_normal({cfg.attention_dim, 1}, 1.0 / std::sqrt(h), rng);
  p["head.weight"] = trunc_normal({cfg.input_dim, cfg.n_bins}, 1.0 / std::sqrt(d), rng);
  p["head.bias"] = Tensor(Shape{cfg.n_bins}, 0.0);
  return p;
}

Pooled attention_pool(Var bag, const Bound& params) {
  const Shape s = bag.shape();
  if (s.size() != 2) throw ShapeError("bag must be [n, D], got " + shape_str(s));
  if (s[0] == 0) throw Error("attention pooling over an empty bag");
  Var scores = ops::matmul(ops::tanh(ops::matmul(bag, params["attn.V"])), params["attn.w"]);  // [n, 1]
  Var a = ops::softmax(ops::reshape(scores, {1, s[0]}));
  Var pooled = ops::matmul(a, bag);  // [1, D]
  return {ops::reshape(pooled, {s[1]}), ops::reshape(a, {s[0]})};
}

Var abmil_logits(Var bag, const Bound& params) {
  Pooled p = attention_pool(bag, params);
  const std::size_t d = p.embedding.shape()[0];
  Var row = ops::reshape(p.embedding, {1, d});
  Var z = linear(row, params["head.weight"], params["head.bias"]);
  return ops::reshape(z, {z.shape()[1]});
}

double discrete_hazard_nll(std::span<const double> z, std::size_t bin, bool event) {
  if (bin >= z.size()) throw Error("hazard bin " + std::to_string(bin) + " out of range");
  double nll = 0.0;
  for (std::size_t j = 0; j < bin; ++j) nll -= std::max(log_sigmoid(-z[j]), kLogFloor);
  nll -= event ? std::max(log_sigmoid(z[bin]), kLogFloor) : std::max(log_sigmoid(-z[bin]), kLogFloor);
  return nll;
}

Var discrete_hazard_nll(Var logits, std::size_t bin, bool event) {
  const Shape s = logits.shape();
  if (s.size() != 1) throw ShapeError("hazard logits must be a vector");
  if (bin >= s[0]) throw Error("hazard bin " + std::to_string(bin) + " out of range");
  auto fwd = [bin, event](std::span<const Tensor* const> in) {
    return Tensor::scalar(discrete_hazard_nll(in[0]->values(), bin, event));
  };
  auto bwd = [bin, event](const BackwardArgs& a) {
    if (!a.grad_inputs[0]) return;
    const Tensor& z = *a.inputs[0];
    Tensor& gz = *a.grad_inputs[0];
    const double go = a.grad_output.item();
    for (std::size_t j = 0; j <= bin; ++j) {
      const bool hit = event && j == bin;
      // d/dz of -log sigmoid(z) is sigmoid(z) - 1; of -log sigmoid(-z) is sigmoid(z).
      const double ls = hit ? log_sigmoid(z[j]) : log_sigmoid(-z[j]);
      if (ls < kLogFloor) continue;  // clamped term is flat
      gz[j] += go * (hit ? sigmoid(z[j]) - 1.0 : sigmoid(z[j]));
    }
  };
  return logits.graph->apply("hazard_nll", {logits}, fwd, bwd);
}

double risk_score(std::span<const double> z) {
  if (z.empty()) throw Error("risk_score needs at least one bin");
  double surv = 1.0, total = 0.0;
  for (double v : z) {
    surv *= 1.0 - sigmoid(v);
    total += surv;
  }
  return -total;
}

namespace {

Tensor standardize(const Tensor& bag, const std::vector<double>& mean, const std::vector<double>& sd) {
  if (bag.rank() != 2 || bag.dim(1) != mean.size()) throw ShapeError("bag dimension does not match the model");
  Tensor out = bag;
  const std::size_t d = mean.size();
  for (std::size_t i = 0; i < bag.dim(0); ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (bag[i * d + j] - mean[j]) / sd[j];
  }
  return out;
}

}  // namespace

AbmilModel train_abmil(std::span<const Tensor> bags, std::span<const SlideRecord> records,
                       std::span<const std::size_t> train, const AbmilConfig& cfg, double lr, std::uint64_t seed) {
  cfg.validate();
  if (bags.size() != records.size()) throw ShapeError("one bag per record required");
  if (train.empty()) throw Error("ABMIL training set is empty");
  AbmilModel m;
  m.config = cfg;
  std::vector<SlideRecord> train_records;
  for (auto i : train) train_records.push_back(records[i]);
  m.bins = make_time_bins(train_records, cfg.n_bins);

  // Feature standardization from training tiles.
  const std::size_t d = cfg.input_dim;
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double count = 0.0;
  for (auto i : train) {
    const Tensor& b = bags[i];
    if (b.rank() != 2 || b.dim(1) != d) throw ShapeError("bag dimension does not match input_dim");
    for (std::size_t r = 0; r < b.dim(0); ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        sum[j] += b[r * d + j];
        sq[j] += b[r * d + j] * b[r * d + j];
      }
    }
    count += static_cast<double>(b.dim(0));
  }
  m.feature_mean.resize(d);
  m.feature_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    m.feature_mean[j] = sum[j] / count;
    const double var = std::max(0.0, sq[j] / count - m.feature_mean[j] * m.feature_mean[j]);
    m.feature_std[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  std::vector<Tensor> std_bags(bags.size());
  for (auto i : train) std_bags[i] = standardize(bags[i], m.feature_mean, m.feature_std);

  std::mt19937_64 rng(seed);
  m.params = init_abmil(cfg, rng);
  AdamW opt(AdamW::Config{0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::size_t> order(train.begin(), train.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto i : order) {
      Graph g;
      Bound b(g, m.params, "", true);
      Var z = abmil_logits(g.input("bag", std_bags[i]), b);
      Var loss = discrete_hazard_nll(z, m.bins.bin_of(records[i].time), records[i].event != 0);
      if (!std::isfinite(loss.value().item())) throw NonFiniteError("non-finite ABMIL loss", loss.id, "hazard_nll");
      opt.step(m.params, b.gradients(g.backward(loss)), lr);
    }
  }
  return m;
}

AbmilPrediction predict_abmil(const AbmilModel& model, const Tensor& bag) {
  Graph g;
  Bound b(g, model.params, "", false);
  Var x = g.input("bag", standardize(bag, model.feature_mean, model.feature_std));
  Pooled p = attention_pool(x, b);
  Var z = abmil_logits(x, b);
  AbmilPrediction out;
  out.logits.assign(z.value().values().begin(), z.value().values().end());
  out.attention.assign(p.attention.value().values().begin(), p.attention.value().values().end());
  out.risk = risk_score(out.logits);
  return out;
}

namespace {

double c_index_of(std::span<const std::size_t> idx, std::span<const double> risk, std::span<const SlideRecord> records) {
  std::vector<double> t;
  std::vector<int> e;
  for (auto i : idx) {
    t.push_back(records[i].time);
    e.push_back(records[i].event);
  }
  try {
    return eval::concordance_index(risk, t, e);
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

CvResult abmil_cross_validation(std::span<const Tensor> bags, std::span<const SlideRecord> records,
                                std::span<const std::size_t> fold_of, std::size_t n_folds, const AbmilConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate();
  if (n_folds < 3) throw Error("cross-validation needs at least 3 folds (train, validation, test)");
  if (fold_of.size() != records.size() || bags.size() != records.size()) throw ShapeError("one fold and bag per record required");
  std::vector<std::vector<std::size_t>> members(n_folds);
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] >= n_folds) throw Error("fold index out of range");
    members[fold_of[i]].push_back(i);
  }
  struct Split {
    std::vector<std::size_t> train, val, test;
  };
  std::vector<Split> splits(n_folds);
  for (std::size_t f = 0; f < n_folds; ++f) {
    const std::size_t v = (f + 1) % n_folds;
    splits[f].test = members[f];
    splits[f].val = members[v];
    for (std::size_t o = 0; o < n_folds; ++o) {
      if (o != f && o != v) splits[f].train.insert(splits[f].train.end(), members[o].begin(), members[o].end());
    }
    std::sort(splits[f].train.begin(), splits[f].train.end());
  }

  CvResult cv;
  std::vector<std::vector<AbmilModel>> models(cfg.learning_rates.size());
  std::size_t best = 0;
  for (std::size_t li = 0; li < cfg.learning_rates.size(); ++li) {
    double total = 0.0, n = 0.0;
    for (std::size_t f = 0; f < n_folds; ++f) {
      AbmilModel m = train_abmil(bags, records, splits[f].train, cfg, cfg.learning_rates[li], derive_seed(seed, f));
      std::vector<double> risk;
      for (auto i : splits[f].val) risk.push_back(predict_abmil(m, bags[i]).risk);
      const double c = c_index_of(splits[f].val, risk, records);
      if (std::isfinite(c)) total += c, n += 1.0;
      models[li].push_back(std::move(m));
    }
    const double mean = n > 0 ? total / n : 0.0;
    cv.validation_c_index.push_back(mean);
    spdlog::info("ABMIL lr={:g}: mean validation C-index {:.4f}", cfg.learning_rates[li], mean);
  }
  // Highest validation C-index; ties go to the lower learning rate.
  for (std::size_t li = 1; li < cfg.learning_rates.size(); ++li) {
    const double a = cv.validation_c_index[li], b = cv.validation_c_index[best];
    if (a > b || (a == b && cfg.learning_rates[li] < cfg.learning_rates[best])) best = li;
  }
  cv.learning_rate = cfg.learning_rates[best];
  double total = 0.0, n = 0.0;
  for (std::size_t f = 0; f < n_folds; ++f) {
    FoldResult fr;
    fr.fold = f;
    fr.slides = splits[f].test;
    for (auto i : fr.slides) {
      AbmilPrediction p = predict_abmil(models[best][f], bags[i]);
      fr.risks.push_back(p.risk);
      fr.attention.push_back(std::move(p.attention));
    }
    fr.c_index = c_index_of(fr.slides, fr.risks, records);
    if (std::isfinite(fr.c_index)) total += fr.c_index, n += 1.0;
    cv.folds.push_back(std::move(fr));
  }
  cv.mean_c_index = n > 0 ? total / n : std::numeric_limits<double>::quiet_NaN();
  return cv;
}

std::string cv_json(const CvResult& cv, std::span<const SlideRecord> records) {
  json folds = json::array();
  for (const auto& f : cv.folds) {
    json slides = json::array();
    for (std::size_t k = 0; k < f.slides.size(); ++k) {
      slides.push_back({{"slide_id", records[f.slides[k]].slide_id}, {"risk", f.risks[k]}});
    }
    folds.push_back({{"fold", f.fold},
                     {"c_index", std::isfinite(f.c_index) ? json(f.c_index) : json(nullptr)},
                     {"learning_rate", cv.learning_rate},
                     {"slides", slides}});
  }
  json j{{"learning_rate", cv.learning_rate},
         {"mean_c_index", std::isfinite(cv.mean_c_index) ? json(cv.mean_c_index) : json(nullptr)},
         {"validation_c_index", cv.validation_c_index},
         {"folds", folds}};
  return j.dump(2) + "\n";
}

namespace {

struct CoxData {
  Eigen::MatrixXd x;  // centered
  std::vector<double> times;
  std::vector<int> events;
  std::vector<std::vector<std::size_t>> strata;  // row indices sorted by time descending
};

CoxData prepare(const Tensor& x, std::span<const double> times, std::span<const int> events, std::span<const int> strata) {
  if (x.rank() != 2) throw ShapeError("Cox covariates must be [n, p]");
  const std::size_t n = x.dim(0), p = x.dim(1);
  if (times.size() != n || events.size() != n) throw ShapeError("one time and event per row required");
  if (!strata.empty() && strata.size() != n) throw ShapeError("one stratum per row required");
  CoxData d;
  d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x.at(i, j);
  }
  const Eigen::RowVectorXd mu = d.x.colwise().mean();
  d.x.rowwise() -= mu;
  d.times.assign(times.begin(), times.end());
  d.events.assign(events.begin(), events.end());
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[strata.empty() ? 0 : strata[i]].push_back(i);
  for (auto& [s, rows] : groups) {
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) { return d.times[a] > d.times[b]; });
    d.strata.push_back(std::move(rows));
  }
  return d;
}

struct CoxEval {
  double ll = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;
};

// Breslow log partial likelihood, gradient and observed information.
CoxEval evaluate(const CoxData& d, const Eigen::VectorXd& beta, bool derivatives) {
  const Eigen::Index p = d.x.cols();
  CoxEval e;
  e.grad = Eigen::VectorXd::Zero(p);
  e.info = Eigen::MatrixXd::Zero(p, p);
  const Eigen::VectorXd eta = d.x * beta;
  for (const auto& rows : d.strata) {
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    // Shift for numerical range within the stratum.
    double shift = -std::numeric_limits<double>::infinity();
    for (auto i : rows) shift = std::max(shift, eta(static_cast<Eigen::Index>(i)));
    std::size_t k = 0;
    while (k < rows.size()) {
      const double t = d.times[rows[k]];
      std::size_t end = k;
      double dcount = 0.0;
      Eigen::VectorXd xsum = Eigen::VectorXd::Zero(p);
      double eta_sum = 0.0;
      while (end < rows.size() && d.times[rows[end]] == t) {
        const auto i = static_cast<Eigen::Index>(rows[end]);
        const double w = std::exp(eta(i) - shift);
        s0 += w;
        if (derivatives) {
          s1 += w * d.x.row(i).transpose();
          s2 += w * d.x.row(i).transpose() * d.x.row(i);
        }
        if (d.events[rows[end]]) {
          dcount += 1.0;
          eta_sum += eta(i);
          if (derivatives) xsum += d.x.row(i).transpose();
        }
        ++end;
      }
      if (dcount > 0.0) {
        e.ll += eta_sum - dcount * (std::log(s0) + shift);
        if (derivatives) {
          const Eigen::VectorXd mean = s1 / s0;
          e.grad += xsum - dcount * mean;
          e.info += dcount * (s2 / s0 - mean * mean.transpose());
        }
      }
      k = end;
    }
  }
  return e;
}

}  // namespace

double cox_log_likelihood(const Tensor& x, std::span<const double> times, std::span<const int> events,
                          std::span<const int> strata, std::span<const double> beta) {
  CoxData d = prepare(x, times, events, strata);
  if (beta.size() != static_cast<std::size_t>(d.x.cols())) throw ShapeError("beta length mismatch");
  Eigen::VectorXd b(d.x.cols());
  for (Eigen::Index j = 0; j < b.size(); ++j) b(j) = beta[static_cast<std::size_t>(j)];
  return evaluate(d, b, false).ll;
}

CoxResult coxph_fit(const Tensor& x, std::span<const double> times, std::span<const int> events,
                    std::span<const int> strata, const CoxOptions& options) {
  CoxData d = prepare(x, times, events, strata);
  const Eigen::Index p = d.x.cols();
  if (p == 0) throw Error("Cox model needs at least one covariate");
  Eigen::VectorXd sd(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    sd(j) = std::sqrt(d.x.col(j).squaredNorm() / static_cast<double>(d.x.rows()));
    if (!(sd(j) > 1e-12)) throw Error("Cox covariate " + std::to_string(j) + " is constant");
  }
  for (const auto& rows : d.strata) {
    if (std::none_of(rows.begin(), rows.end(), [&](std::size_t i) { return d.events[i] != 0; })) {
      throw Error("Cox stratum without events");
    }
  }
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  CoxEval cur = evaluate(d, beta, true);
  CoxResult r;
  for (std::size_t it = 1; it <= options.max_iterations; ++it) {
    r.iterations = it;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(cur.info);
    Eigen::VectorXd step;
    const bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-14;
    if (ok) step = ldlt.solve(cur.grad);
    if (!ok || !step.allFinite()) {
      // Information vanishing away from the origin is the signature of separation.
      if (it > 1) {
        r.separation = true;
        break;
      }
      throw Error("singular Cox information matrix");
    }
    CoxEval next = evaluate(d, beta + step, true);
    for (int h = 0; h < 30 && !(next.ll >= cur.ll - 1e-12); ++h) {
      step *= 0.5;
      next = evaluate(d, beta + step, true);
    }
    beta += step;
    const double delta = std::abs(next.ll - cur.ll);
    cur = std::move(next);
    if (delta < options.tolerance) {
      r.converged = true;
      break;
    }
  }
  // Monotone likelihood: a hazard ratio beyond e^15 per covariate SD.
  r.separation = r.separation || ((beta.array().abs() * sd.array()) > 15.0).any();
  if (!r.converged && !r.separation) {
    throw ConvergenceError("Cox Newton-Raphson did not converge in " + std::to_string(options.max_iterations) + " iterations");
  }
  if (r.separation) spdlog::warn("Cox fit: monotone likelihood (separation); coefficients diverge");
  r.beta.assign(beta.data(), beta.data() + p);
  r.log_likelihood = cur.ll;
  r.se.assign(static_cast<std::size_t>(p), std::numeric_limits<double>::infinity());
  Eigen::FullPivLU<Eigen::MatrixXd> lu(cur.info);
  if (lu.isInvertible()) {
    const Eigen::MatrixXd inv = lu.inverse();
    for (Eigen::Index j = 0; j < p; ++j) r.se[static_cast<std::size_t>(j)] = std::sqrt(std::max(0.0, inv(j, j)));
  } else if (!r.separation) {
    throw Error("singular Cox information matrix at the optimum");
  }
  return r;
}

double wald_p(double beta, double se) {
  if (!std::isfinite(se) || se <= 0.0) return 1.0;
  return std::erfc(std::abs(beta / se) / std::sqrt(2.0));
}

double bonferroni(double p, std::size_t m) { return std::min(1.0, p * static_cast<double>(m)); }

Association association_analysis(std::span<const double> feature, std::span<const SlideRecord> records,
                                 std::size_t n_tests) {
  if (feature.size() != records.size()) throw ShapeError("one feature value per record required");
  for (double v : feature) {
    if (!std::isfinite(v)) throw Error("association feature must be finite");
  }
  const auto [lo, hi] = std::minmax_element(feature.begin(), feature.end());
  if (feature.empty() || *lo == *hi) throw Error("association feature is constant");
  std::vector<double> t, neg;
  std::vector<int> e, s;
  bool stratified = true;
  for (std::size_t i = 0; i < records.size(); ++i) {
    t.push_back(records[i].time);
    e.push_back(records[i].event);
    s.push_back(records[i].stratum);
    neg.push_back(-feature[i]);
    stratified = stratified && records[i].stratum >= 0;
  }
  Association a;
  a.c_index = eval::concordance_index(neg, t, e);
  Tensor x(Shape{feature.size(), 1});
  for (std::size_t i = 0; i < feature.size(); ++i) x[i] = feature[i];
  CoxResult fit = coxph_fit(x, t, e);
  a.beta = fit.beta[0];
  a.se = fit.se[0];
  a.p = wald_p(a.beta, a.se);
  a.p_adjusted = bonferroni(a.p, std::max<std::size_t>(1, n_tests));
  if (stratified) {
    CoxResult sf = coxph_fit(x, t, e, s);
    a.p_stratified = wald_p(sf.beta[0], sf.se[0]);
  }
  return a;
}

}  // namespace advdino::surv
