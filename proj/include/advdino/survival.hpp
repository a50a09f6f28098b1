#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "advdino/checkpoint.hpp"
#include "advdino/graph.hpp"
#include "advdino/module.hpp"
#include "advdino/records.hpp"

namespace advdino::surv {

// Interval k holds times t with cuts[k-1] < t <= cuts[k].
struct TimeBins {
  std::vector<double> cuts;

  std::size_t count() const { return cuts.size() + 1; }
  std::size_t bin_of(double t) const;
};

// Cuts at evenly spaced percentiles (linear interpolation) of event times only.
TimeBins make_time_bins(std::span<const SlideRecord> records, std::size_t n_bins = 4);

struct AbmilConfig {
  std::size_t input_dim = 64;
  std::size_t attention_dim = 32;
  std::size_t n_bins = 4;
  std::size_t epochs = 80;
  std::vector<double> learning_rates{1e-6, 1e-5, 1e-4};
  double weight_decay = 1e-4;

  void validate() const;
};

// attn.V [D, H], attn.w [H, 1], head.weight [D, K], head.bias [K].
ParamStore init_abmil(const AbmilConfig& cfg, std::mt19937_64& rng);

struct Pooled {
  Var embedding;  // [D]
  Var attention;  // [n]
};

// a = softmax_i(w^T tanh(V^T h_i)); output sum_i a_i h_i.
Pooled attention_pool(Var bag, const Bound& params);

// Hazard logits [K] for a bag [n, D].
Var abmil_logits(Var bag, const Bound& params);

// Negative log-likelihood of the discrete-time hazard model; log terms are
// clamped at log(1e-12).
Var discrete_hazard_nll(Var logits, std::size_t bin, bool event);
double discrete_hazard_nll(std::span<const double> logits, std::size_t bin, bool event);

// -sum_k S_k with S_k = prod_{j<=k} (1 - sigmoid(z_j)); higher means worse.
double risk_score(std::span<const double> logits);

struct AbmilModel {
  AbmilConfig config;
  ParamStore params;
  TimeBins bins;
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
};

struct AbmilPrediction {
  double risk = 0.0;
  std::vector<double> logits;
  std::vector<double> attention;
};

// Trains on records[train] with one AdamW step per bag, constant lr.
AbmilModel train_abmil(std::span<const Tensor> bags, std::span<const SlideRecord> records,
                       std::span<const std::size_t> train, const AbmilConfig& cfg, double lr, std::uint64_t seed);

AbmilPrediction predict_abmil(const AbmilModel& model, const Tensor& bag);

struct FoldResult {
  std::size_t fold = 0;
  double c_index = 0.0;
  std::vector<std::size_t> slides;  // test slide indices
  std::vector<double> risks;
  std::vector<std::vector<double>> attention;
};

struct CvResult {
  double learning_rate = 0.0;
  double mean_c_index = 0.0;
  std::vector<double> validation_c_index;  // mean per candidate learning rate
  std::vector<FoldResult> folds;
};

// Split f: test fold f, validation fold (f + 1) mod k, training the rest. The
// learning rate with the highest mean validation C-index is used for every
// test fold; ties go to the lower rate.
CvResult abmil_cross_validation(std::span<const Tensor> bags, std::span<const SlideRecord> records,
                                std::span<const std::size_t> fold_of, std::size_t n_folds, const AbmilConfig& cfg,
                                std::uint64_t seed);

std::string cv_json(const CvResult& cv, std::span<const SlideRecord> records);

struct CoxOptions {
  std::size_t max_iterations = 50;
  double tolerance = 1e-9;
};

struct CoxResult {
  std::vector<double> beta;
  std::vector<double> se;
  double log_likelihood = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  bool separation = false;  // monotone likelihood: coefficients diverge
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Breslow partial log-likelihood; strata empty or one id per row.
double cox_log_likelihood(const Tensor& x, std::span<const double> times, std::span<const int> events,
                          std::span<const int> strata, std::span<const double> beta);

CoxResult coxph_fit(const Tensor& x, std::span<const double> times, std::span<const int> events,
                    std::span<const int> strata = {}, const CoxOptions& options = {});

// Two-sided Wald p-value 2 * Phi(-|z|).
double wald_p(double beta, double se);
double bonferroni(double p, std::size_t m);

struct Association {
  double c_index = 0.0;  // > 0.5 when a higher feature goes with longer survival
  double beta = 0.0;
  double se = 0.0;
  double p = 1.0;
  double p_adjusted = 1.0;
  std::optional<double> p_stratified;
};

// Uses record strata when every record carries one.
Association association_analysis(std::span<const double> feature, std::span<const SlideRecord> records,
                                 std::size_t n_tests);

}  // namespace advdino::surv
