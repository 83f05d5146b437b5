#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "moa/domains.hpp"
#include "moa/moa_layer.hpp"
#include "moa/rng.hpp"
#include "moa/vit.hpp"

namespace moa {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_per_domain = 32;
  std::size_t steps = 5000;
  std::size_t eval_interval = 200;
  std::uint64_t seed = 0;
  FreezePolicy policy = FreezePolicy::AdapterOnly;
  double aux_scale = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t eval_batch = 64;

  void validate() const;
};

/// Adaptive-moment optimizer state. Moments exist only for parameters that
/// were trainable when the state was created.
class AdamState {
 public:
  explicit AdamState(const ParamStore& params);

  /// One bias-corrected update from the grads held in `params`.
  void step(ParamStore& params, const TrainConfig& config);

  std::size_t steps() const noexcept { return steps_; }
  bool tracks(const std::string& name) const { return moments_.contains(name); }
  std::size_t tracked() const noexcept { return moments_.size(); }
  const Tensor& first_moment(const std::string& name) const { return moments_.at(name).m; }
  const Tensor& second_moment(const std::string& name) const { return moments_.at(name).v; }

 private:
  struct Moments {
    Tensor m, v;
  };
  std::unordered_map<std::string, Moments> moments_;
  std::size_t steps_ = 0;
};

/// Loss = mean over domains of mean cross-entropy + aux_scale * sum of
/// per-layer aux losses.
struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double aux = 0.0;  // unscaled sum over MoA layers
  std::vector<double> domain_ce;
  std::vector<double> layer_aux;
};

using DomainBatches = std::vector<std::vector<const Sample*>>;

/// Forward + backward of the ERM objective on `store`; gradients are added
/// to `store`'s grad tensors for trainable entries.
LossBreakdown erm_loss_and_grad(const ViTModel& model, ParamStore& store,
                                const DomainBatches& batches, double aux_scale);
/// Forward only.
LossBreakdown erm_loss(const ViTModel& model, const ParamStore& store, const DomainBatches& batches,
                       double aux_scale);

/// Zeroes grads, computes the loss over one minibatch per source domain and
/// applies one optimizer update to the model's trainable parameters.
LossBreakdown erm_step(ViTModel& model, AdamState& optimizer, const DomainBatches& batches,
                       const TrainConfig& config);

/// Endless per-domain sampler: a seeded shuffle, consumed cyclically and
/// reshuffled at every wrap.
class DomainSampler {
 public:
  DomainSampler(std::vector<std::size_t> indices, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t n);

 private:
  std::vector<std::size_t> indices_;
  std::size_t pos_ = 0;
  Rng rng_;
};

struct EvalPoint {
  std::size_t step = 0;
  double loss_ce = 0.0;
  double loss_aux = 0.0;
  std::vector<double> domain_loss;
  double src_val_acc = 0.0;
  double target_acc = 0.0;
  double alloc_std = 0.0;  // mean over MoA layers, on source validation tokens
  std::vector<std::vector<double>> alloc_fractions;  // per MoA layer
};

struct TrainRecord {
  std::vector<EvalPoint> points;

  /// Columns step,loss_ce,loss_aux,src_val_acc,target_acc,alloc_std;
  /// reals with 17 significant digits.
  std::string to_csv() const;
};

struct TrainResult {
  ParamStore best;
  std::size_t best_step = 0;
  double best_src_val_acc = 0.0;
  TrainRecord record;
};

/// ERM over the split's source domains with training-domain validation
/// model selection (highest source-validation accuracy, earliest step on
/// ties). Evaluates at step 0, every eval_interval steps and at the end.
TrainResult train_loop(ViTModel& model, const TrainConfig& config, std::span<const Sample> dataset,
                       const SplitPlan& split);

struct Predictions {
  std::vector<std::size_t> labels;  // argmax, lowest class on ties
  Tensor probs;                     // samples x classes
  std::vector<RoutingRecord> records;
};

Predictions predict(const ViTModel& model, const ParamStore& store,
                    std::span<const Sample* const> samples, std::size_t batch = 64,
                    bool keep_records = false);

double accuracy(std::span<const std::size_t> predicted, std::span<const Sample* const> samples);

/// Fraction of samples whose argmax prediction equals the label.
double evaluate(const ViTModel& model, const ParamStore& store,
                std::span<const Sample* const> samples);
double evaluate(const ViTModel& model, std::span<const Sample* const> samples);

/// Averages the softmax outputs of several models, then takes the argmax.
/// Throws CheckpointError when the models do not share one architecture.
std::vector<std::size_t> ensemble_predictions(std::span<const ViTModel* const> models,
                                              std::span<const Sample* const> samples);
double ensemble_predict(std::span<const ViTModel* const> models,
                        std::span<const Sample* const> samples);

std::vector<const Sample*> select(std::span<const Sample> dataset,
                                  std::span<const std::size_t> indices);

}  // namespace moa
