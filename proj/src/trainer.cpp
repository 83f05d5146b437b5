#include "moa/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "moa/errors.hpp"
#include "moa/ops.hpp"
#include "moa/rng.hpp"

namespace moa {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (batch_per_domain == 0) throw ArgumentError("batch_per_domain must be positive");
  if (eval_interval == 0) throw ArgumentError("eval_interval must be positive");
  if (!(aux_scale >= 0.0)) throw ArgumentError("aux_scale must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw ArgumentError("invalid optimizer moments");
  }
  if (eval_batch == 0) throw ArgumentError("eval_batch must be positive");
}

AdamState::AdamState(const ParamStore& params) {
  for (const auto& e : params.entries()) {
    if (e.frozen) continue;
    moments_.emplace(e.name, Moments{Tensor(e.value.rows(), e.value.cols()),
                                     Tensor(e.value.rows(), e.value.cols())});
  }
}

void AdamState::step(ParamStore& params, const TrainConfig& c) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& e : params.entries()) {
    if (e.frozen) continue;
    auto it = moments_.find(e.name);
    if (it == moments_.end()) {
      throw ArgumentError("optimizer has no state for trainable parameter '" + e.name + "'");
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      e.value[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

namespace {

LossBreakdown run_objective(const ViTModel& model, const ParamStore& store,
                            const DomainBatches& batches, double aux_scale, ParamStore* grads) {
  if (batches.empty()) throw ArgumentError("erm: no domain batches");
  std::vector<const Image*> images;
  std::vector<std::vector<std::size_t>> rows(batches.size());
  std::vector<std::vector<std::size_t>> labels(batches.size());
  for (std::size_t d = 0; d < batches.size(); ++d) {
    if (batches[d].empty()) throw ArgumentError("erm: empty minibatch for domain " + std::to_string(d));
    for (const Sample* s : batches[d]) {
      rows[d].push_back(images.size());
      labels[d].push_back(s->label);
      images.push_back(&s->image);
    }
  }
  Tape tape(grads != nullptr);
  ForwardResult fwd = model.forward(tape, store, images);

  LossBreakdown out;
  Var ce_sum;
  for (std::size_t d = 0; d < batches.size(); ++d) {
    Var ce = cross_entropy(gather_rows(fwd.logits, rows[d]), labels[d]);
    out.domain_ce.push_back(ce.value().item());
    ce_sum = ce_sum.valid() ? add(ce_sum, ce) : ce;
  }
  Var ce_term = scale(ce_sum, 1.0 / static_cast<double>(batches.size()));
  out.ce = ce_term.value().item();

  Var aux_sum;
  for (const auto& rec : fwd.records) {
    Var a = aux_loss(rec);
    out.layer_aux.push_back(a.value().item());
    aux_sum = aux_sum.valid() ? add(aux_sum, a) : a;
  }
  Var total = ce_term;
  if (aux_sum.valid()) {
    out.aux = aux_sum.value().item();
    if (aux_scale != 0.0) total = add(ce_term, scale(aux_sum, aux_scale));
  }
  out.total = total.value().item();

  if (grads != nullptr) {
    tape.backward(total);
    tape.accumulate_param_grads(*grads);
  }
  return out;
}

}  // namespace

LossBreakdown erm_loss_and_grad(const ViTModel& model, ParamStore& store,
                                const DomainBatches& batches, double aux_scale) {
  return run_objective(model, store, batches, aux_scale, &store);
}

LossBreakdown erm_loss(const ViTModel& model, const ParamStore& store, const DomainBatches& batches,
                       double aux_scale) {
  return run_objective(model, store, batches, aux_scale, nullptr);
}

LossBreakdown erm_step(ViTModel& model, AdamState& optimizer, const DomainBatches& batches,
                       const TrainConfig& config) {
  ParamStore& store = model.params();
  store.zero_grad();
  LossBreakdown loss = erm_loss_and_grad(model, store, batches, config.aux_scale);
  optimizer.step(store, config);
  return loss;
}

DomainSampler::DomainSampler(std::vector<std::size_t> indices, std::uint64_t seed)
    : indices_(std::move(indices)), rng_(seed) {
  if (indices_.empty()) throw ArgumentError("DomainSampler: no samples");
  rng_.shuffle(indices_);
}

std::vector<std::size_t> DomainSampler::next(std::size_t n) {
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    if (pos_ == indices_.size()) {
      rng_.shuffle(indices_);
      pos_ = 0;
    }
    out.push_back(indices_[pos_++]);
  }
  return out;
}

std::string TrainRecord::to_csv() const {
  std::string out = "step,loss_ce,loss_aux,src_val_acc,target_acc,alloc_std\n";
  char buf[512];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.step, p.loss_ce,
                  p.loss_aux, p.src_val_acc, p.target_acc, p.alloc_std);
    out += buf;
  }
  return out;
}

std::vector<const Sample*> select(std::span<const Sample> dataset,
                                  std::span<const std::size_t> indices) {
  std::vector<const Sample*> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(&dataset[i]);
  return out;
}

Predictions predict(const ViTModel& model, const ParamStore& store,
                    std::span<const Sample* const> samples, std::size_t batch, bool keep_records) {
  if (samples.empty()) throw ArgumentError("predict: no samples");
  const std::size_t classes = model.config().num_classes;
  Predictions out;
  out.probs = Tensor(samples.size(), classes);
  out.labels.resize(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const Image*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&samples[i]->image);
    Tape tape(false);
    ForwardResult fwd = model.forward(tape, store, images);
    Var probs = softmax_rows(fwd.logits);
    const Tensor& pv = probs.value();
    for (std::size_t i = start; i < end; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 0; c < classes; ++c) {
        out.probs(i, c) = pv(i - start, c);
        if (pv(i - start, c) > pv(i - start, best)) best = c;
      }
      out.labels[i] = best;
    }
    if (keep_records) {
      for (auto& r : fwd.records) {
        r.probs_var = Var();
        out.records.push_back(std::move(r));
      }
    }
  }
  return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const Sample* const> samples) {
  if (samples.empty()) throw ArgumentError("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) hits += predicted[i] == samples[i]->label;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double evaluate(const ViTModel& model, const ParamStore& store,
                std::span<const Sample* const> samples) {
  if (samples.empty()) throw ArgumentError("evaluate: no samples");
  Predictions p = predict(model, store, samples);
  return accuracy(p.labels, samples);
}

double evaluate(const ViTModel& model, std::span<const Sample* const> samples) {
  return evaluate(model, model.params(), samples);
}

std::vector<std::size_t> ensemble_predictions(std::span<const ViTModel* const> models,
                                              std::span<const Sample* const> samples) {
  if (models.empty()) throw ArgumentError("ensemble: no models");
  if (samples.empty()) throw ArgumentError("ensemble: no samples");
  const ViTModel& first = *models.front();
  for (const ViTModel* m : models) {
    bool same = m->layout().size() == first.layout().size() &&
                m->config().num_classes == first.config().num_classes;
    for (std::size_t i = 0; same && i < first.layout().size(); ++i) {
      const auto& a = first.layout()[i];
      const auto& b = m->layout()[i];
      same = a.name == b.name && a.rows == b.rows && a.cols == b.cols;
    }
    if (!same) throw CheckpointError("ensemble members do not share one architecture");
  }
  const std::size_t classes = first.config().num_classes;
  Tensor total(samples.size(), classes);
  for (const ViTModel* m : models) total += predict(*m, m->params(), samples).probs;
  const double inv = 1.0 / static_cast<double>(models.size());
  std::vector<std::size_t> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      total(i, c) *= inv;
      if (total(i, c) > total(i, best)) best = c;
    }
    labels[i] = best;
  }
  return labels;
}

double ensemble_predict(std::span<const ViTModel* const> models,
                        std::span<const Sample* const> samples) {
  return accuracy(ensemble_predictions(models, samples), samples);
}

namespace {

void evaluate_point(const ViTModel& model, const TrainConfig& config,
                    const std::vector<const Sample*>& val, const std::vector<const Sample*>& target,
                    EvalPoint& point) {
  const ParamStore& store = model.params();
  Predictions pv = predict(model, store, val, config.eval_batch, true);
  point.src_val_acc = accuracy(pv.labels, val);
  point.target_acc = evaluate(model, store, target);
  // Group routing records by MoA layer (block, attach).
  const auto& layers = model.moa_layers();
  double std_sum = 0.0;
  for (const auto& layer : layers) {
    std::vector<RoutingRecord> mine;
    for (const auto& r : pv.records) {
      if (r.block == layer.block && r.attach == layer.attach) mine.push_back(r);
    }
    AllocationStats s = allocation_stats(mine);
    point.alloc_fractions.push_back(s.fractions);
    std_sum += s.stddev;
  }
  point.alloc_std = layers.empty() ? 0.0 : std_sum / static_cast<double>(layers.size());
}

}  // namespace

TrainResult train_loop(ViTModel& model, const TrainConfig& config, std::span<const Sample> dataset,
                       const SplitPlan& split) {
  config.validate();
  if (split.source_domains.empty()) throw ArgumentError("train_loop: split has no source domains");
  model.set_policy(config.policy);
  AdamState optimizer(model.params());

  std::vector<DomainSampler> samplers;
  std::vector<const Sample*> val;
  for (std::size_t i = 0; i < split.source_domains.size(); ++i) {
    samplers.emplace_back(split.train[i],
                          derive_seed(derive_seed(config.seed, "batches"), split.source_domains[i]));
    for (std::size_t idx : split.val[i]) val.push_back(&dataset[idx]);
  }
  if (val.empty()) throw ArgumentError("train_loop: empty source validation set");
  const std::vector<const Sample*> target = select(dataset, split.target);

  auto draw = [&]() {
    DomainBatches batches;
    for (auto& s : samplers) {
      std::vector<const Sample*> batch;
      for (std::size_t idx : s.next(config.batch_per_domain)) batch.push_back(&dataset[idx]);
      batches.push_back(std::move(batch));
    }
    return batches;
  };

  TrainResult result;
  DomainBatches next_batches = draw();
  auto record_point = [&](std::size_t step, const LossBreakdown& loss) {
    EvalPoint point;
    point.step = step;
    point.loss_ce = loss.ce;
    point.loss_aux = loss.aux;
    point.domain_loss = loss.domain_ce;
    evaluate_point(model, config, val, target, point);
    if (result.record.points.empty() || point.src_val_acc > result.best_src_val_acc) {
      result.best = model.params();
      result.best_step = step;
      result.best_src_val_acc = point.src_val_acc;
    }
    result.record.points.push_back(std::move(point));
  };

  record_point(0, erm_loss(model, model.params(), next_batches, config.aux_scale));
  for (std::size_t step = 1; step <= config.steps; ++step) {
    LossBreakdown loss = erm_step(model, optimizer, next_batches, config);
    next_batches = draw();
    if (step % config.eval_interval == 0 || step == config.steps) record_point(step, loss);
  }
  return result;
}

}  // namespace moa
