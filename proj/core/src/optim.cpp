#include "metabdc/optim.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

namespace metabdc {

double lr_from_batch(std::int64_t batch_size) {
  if (batch_size <= 0) throw Error("lr_from_batch: batch size must be positive");
  return 0.3 * static_cast<double>(batch_size) / 256.0;
}

void ScheduleConfig::validate() const {
  if (!(base_lr > 0.0)) throw Error("schedule: base LR must be positive");
  if (total_epochs == 0) throw Error("schedule: total epochs must be positive");
  if (kind == ScheduleKind::step) {
    if (!(decay_factor > 0.0)) throw Error("schedule: decay factor must be positive");
    for (std::size_t e : decay_epochs) {
      if (e >= total_epochs) {
        throw Error("schedule: decay epoch " + std::to_string(e) + " not below total " +
                    std::to_string(total_epochs));
      }
    }
  }
}

double schedule_lr(const ScheduleConfig& config, std::size_t epoch) {
  config.validate();
  if (epoch >= config.total_epochs) {
    throw Error("schedule_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                std::to_string(config.total_epochs) + ")");
  }
  if (config.kind == ScheduleKind::cosine) {
    const double t = static_cast<double>(epoch) / static_cast<double>(config.total_epochs);
    return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  double lr = config.base_lr;
  for (std::size_t e : config.decay_epochs) {
    if (epoch >= e) lr /= config.decay_factor;
  }
  return lr;
}

template <typename T>
Sgd<T>::Sgd(const ParameterSet<T>& params, SgdConfig config) : config_(config) {
  if (config.momentum < 0.0 || config.momentum >= 1.0) throw Error("sgd: momentum must be in [0, 1)");
  if (config.weight_decay < 0.0) throw Error("sgd: weight decay must be >= 0");
  for (std::size_t i = 0; i < params.size(); ++i) velocity_.emplace_back(params.value_at(i).size(), 0.0);
}

template <typename T>
void Sgd<T>::step(ParameterSet<T>& params, double lr) {
  if (params.size() != velocity_.size()) throw Error("sgd: parameter set changed since construction");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.grad_at(i).all_finite()) {
      throw NumericError("sgd: non-finite gradient for '" + params.names()[i] + "'");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array<T>& p = params.value_at(i);
    const Array<T>& g = params.grad_at(i);
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = static_cast<double>(g[j]) + config_.weight_decay * static_cast<double>(p[j]);
      v[j] = config_.momentum * v[j] + d;
      p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * v[j]);
    }
  }
}

void AucMState::validate() const {
  if (!(margin > 0.0)) throw Error("aucm: margin must be positive");
  if (!(p_hat > 0.0 && p_hat < 1.0)) throw Error("aucm: positive fraction must be in (0, 1)");
  if (alpha < 0.0) throw Error("aucm: alpha must be >= 0");
}

AucMResult aucm_loss(std::span<const double> scores, std::span<const int> labels,
                     const AucMState& st) {
  if (scores.empty()) throw Error("aucm_loss: empty batch");
  if (scores.size() != labels.size()) throw ShapeError("aucm_loss: scores and labels differ in length");
  if (!(st.margin > 0.0)) throw Error("aucm: margin must be positive");
  if (!(st.p_hat > 0.0 && st.p_hat < 1.0)) throw Error("aucm: positive fraction must be in (0, 1)");
  double n_pos = 0.0, n_neg = 0.0;
  for (int y : labels) {
    if (y == 1) {
      n_pos += 1.0;
    } else if (y == 0) {
      n_neg += 1.0;
    } else {
      throw Error("aucm_loss: labels must be 0 or 1");
    }
  }
  const double p = st.p_hat, q = 1.0 - p;
  AucMResult r;
  r.d_scores.assign(scores.size(), 0.0);
  r.loss = 2.0 * st.alpha * st.margin * p * q - p * q * st.alpha * st.alpha;
  r.d_alpha = 2.0 * st.margin * p * q - 2.0 * p * q * st.alpha;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    if (labels[i] == 1) {
      const double e = s - st.a;
      r.loss += (q * e * e - 2.0 * st.alpha * q * s) / n_pos;
      r.d_scores[i] = (2.0 * q * e - 2.0 * st.alpha * q) / n_pos;
      r.d_a += -2.0 * q * e / n_pos;
      r.d_alpha += -2.0 * q * s / n_pos;
    } else {
      const double e = s - st.b;
      r.loss += (p * e * e + 2.0 * st.alpha * p * s) / n_neg;
      r.d_scores[i] = (2.0 * p * e + 2.0 * st.alpha * p) / n_neg;
      r.d_b += -2.0 * p * e / n_neg;
      r.d_alpha += 2.0 * p * s / n_neg;
    }
  }
  return r;
}

namespace {

template <typename T>
class AucMOvrOp final : public Op<T> {
 public:
  AucMOvrOp(std::vector<std::size_t> labels, std::vector<double> p_hat, double margin)
      : labels_(std::move(labels)), p_hat_(std::move(p_hat)), margin_(margin) {}
  std::string_view kind() const override { return "aucm_ovr_loss"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 2) throw ShapeError("scores must be [n, C]");
    const std::size_t n = in[0][0], c = in[0][1];
    if (labels_.size() != n) throw ShapeError("label count differs from score rows");
    for (std::size_t i = 1; i < 4; ++i) {
      if (in[i] != Shape{c}) throw ShapeError("a, b and alpha must be [C]");
    }
    if (p_hat_.size() != c) throw ShapeError("need one positive fraction per class");
    for (std::size_t y : labels_) {
      if (y >= c) throw ShapeError("label outside score columns");
    }
    return Shape{1};
  }
  void forward(std::span<const Array<T>* const> in, Array<T>& out) const override {
    double total = 0.0;
    for_each_class(in, [&](std::size_t, const AucMResult& r) { total += r.loss; });
    out[0] = static_cast<T>(total);
  }
  void backward(std::span<const Array<T>* const> in, const Array<T>&, const Array<T>& go,
                std::span<Array<T>* const> gi) const override {
    const double g = go[0];
    const std::size_t c = in[0]->dim(1);
    for_each_class(in, [&](std::size_t k, const AucMResult& r) {
      if (gi[0]) {
        for (std::size_t i = 0; i < labels_.size(); ++i) (*gi[0])[i * c + k] += static_cast<T>(g * r.d_scores[i]);
      }
      if (gi[1]) (*gi[1])[k] += static_cast<T>(g * r.d_a);
      if (gi[2]) (*gi[2])[k] += static_cast<T>(g * r.d_b);
      if (gi[3]) (*gi[3])[k] += static_cast<T>(g * r.d_alpha);
    });
  }

 private:
  template <typename F>
  void for_each_class(std::span<const Array<T>* const> in, F&& f) const {
    const Array<T>& s = *in[0];
    const std::size_t n = s.dim(0), c = s.dim(1);
    std::vector<double> col(n);
    std::vector<int> y(n);
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        col[i] = s[i * c + k];
        y[i] = labels_[i] == k ? 1 : 0;
      }
      AucMState st;
      st.a = (*in[1])[k];
      st.b = (*in[2])[k];
      st.alpha = (*in[3])[k];
      st.margin = margin_;
      st.p_hat = p_hat_[k];
      f(k, aucm_loss(col, y, st));
    }
  }

  std::vector<std::size_t> labels_;
  std::vector<double> p_hat_;
  double margin_;
};

}  // namespace

template <typename T>
NodeId aucm_ovr_loss(Graph<T>& graph, NodeId scores, NodeId a, NodeId b, NodeId alpha,
                     std::vector<std::size_t> labels, std::vector<double> p_hat, double margin) {
  return graph.apply(std::make_unique<AucMOvrOp<T>>(std::move(labels), std::move(p_hat), margin),
                     {scores, a, b, alpha});
}

void PesgConfig::validate() const {
  if (!(lr > 0.0)) throw Error("pesg: LR must be positive");
  if (weight_decay < 0.0 || epoch_decay < 0.0) throw Error("pesg: decays must be >= 0");
  if (!(decay_factor > 0.0)) throw Error("pesg: decay factor must be positive");
}

template <typename T>
Pesg<T>::Pesg(const ParameterSet<T>& params, PesgConfig config, std::set<std::string> ascent)
    : config_(std::move(config)), ascent_(std::move(ascent)), lr_(config_.lr) {
  config_.validate();
  for (const auto& name : ascent_) {
    if (!params.contains(name)) throw Error("pesg: unknown ascent parameter '" + name + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) reference_.push_back(params.value_at(i));
}

template <typename T>
void Pesg<T>::begin_epoch(std::size_t epoch, const ParameterSet<T>& params) {
  double lr = config_.lr;
  bool boundary = false;
  for (std::size_t e : config_.decay_epochs) {
    if (epoch >= e) lr /= config_.decay_factor;
    if (epoch == e) boundary = true;
  }
  lr_ = lr;
  if (boundary) {
    for (std::size_t i = 0; i < params.size(); ++i) reference_[i] = params.value_at(i);
  }
}

template <typename T>
void Pesg<T>::step(ParameterSet<T>& params) {
  if (params.size() != reference_.size()) throw Error("pesg: parameter set changed since construction");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.grad_at(i).all_finite()) {
      throw NumericError("pesg: non-finite gradient for '" + params.names()[i] + "'");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Array<T>& p = params.value_at(i);
    const Array<T>& g = params.grad_at(i);
    if (ascent_.count(params.names()[i])) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] = static_cast<T>(std::max(0.0, static_cast<double>(p[j]) + lr_ * g[j]));
      }
      continue;
    }
    const Array<T>& ref = reference_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double pj = p[j];
      const double d = g[j] + config_.epoch_decay * (pj - ref[j]) + config_.weight_decay * pj;
      p[j] = static_cast<T>(pj - lr_ * d);
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;
template class Pesg<float>;
template class Pesg<double>;
template NodeId aucm_ovr_loss(Graph<float>&, NodeId, NodeId, NodeId, NodeId,
                              std::vector<std::size_t>, std::vector<double>, double);
template NodeId aucm_ovr_loss(Graph<double>&, NodeId, NodeId, NodeId, NodeId,
                              std::vector<std::size_t>, std::vector<double>, double);

}  // namespace metabdc
