#pragma once

#include "amortix/adam.hpp"
#include "amortix/datasets.hpp"
#include "amortix/loss.hpp"
#include "amortix/metrics.hpp"
#include "amortix/mlp.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace amortix {

struct TrainingAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Fixed-order mini-batch schedule over a shuffled index set.
class BatchSchedule {
 public:
  BatchSchedule(int n, int batch) : n_(n), batch_(std::max(1, batch)), idx_(static_cast<std::size_t>(n)) {
    std::iota(idx_.begin(), idx_.end(), 0);
  }
  void reshuffle(RngStream& rng) { rng.shuffle(std::span<int>(idx_)); }
  int batches() const { return (n_ + batch_ - 1) / batch_; }
  std::vector<int> batch(int b) const {
    const int lo = b * batch_, hi = std::min(n_, lo + batch_);
    return {idx_.begin() + lo, idx_.begin() + hi};
  }

 private:
  int n_, batch_;
  std::vector<int> idx_;
};

inline std::vector<int> labels_of(const std::vector<int>& y, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(y[static_cast<std::size_t>(i)]);
  return out;
}

/// Maps a batch of raw rows to network inputs. The stream is the caller's
/// masking stream; encoders that need no randomness ignore it.
using BatchEncoder = std::function<Matrix(const Matrix& x, RngStream& rng)>;

struct FitOptions {
  AdamConfig adam;
  int batch = 100;
  int max_epochs = 1000;
  int patience = 20;  // epochs without validation improvement; <= 0 disables early stopping
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

struct FitResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::vector<EpochLog> curve;
};

/// Mean cross-entropy of `net` on pre-encoded inputs.
inline double mean_ce(const Mlp& net, const Matrix& inputs, const std::vector<int>& y, double* acc = nullptr) {
  const Matrix probs = net.forward(inputs);
  if (acc) *acc = accuracy(probs, y);
  return cross_entropy(probs, y).loss;
}

/// Maximum-likelihood fit of a softmax classifier with Adam. With validation
/// inputs the best-validation parameters are restored at the end ("While
/// converge" realized as patience); a NaN loss aborts and restores the last
/// good parameters.
inline FitResult fit_classifier(Mlp& net, const Dataset& train, const BatchEncoder& encode, const FitOptions& opt,
                                RngStream shuffle_rng, RngStream mask_rng, const Matrix* val_inputs = nullptr,
                                const std::vector<int>* val_labels = nullptr) {
  FitResult res;
  AdamState adam(net, opt.adam);
  BatchSchedule sched(train.size(), opt.batch);
  Mlp best = net;
  int since_best = 0;
  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    sched.reshuffle(shuffle_rng);
    double total = 0.0;
    for (int b = 0; b < sched.batches(); ++b) {
      const auto idx = sched.batch(b);
      const auto yb = labels_of(train.y, idx);
      const Matrix input = encode(rows_of(train.x, idx), mask_rng);
      Mlp::Cache cache;
      const Matrix probs = net.apply_head(net.logits(input, &cache));
      const auto ce = cross_entropy(probs, yb);
      if (!std::isfinite(ce.loss)) {
        res.diverged = true;
        net = best;
        return res;
      }
      total += ce.loss * static_cast<double>(idx.size());
      auto grads = net.zeros_like();
      net.backward(cache, ce.dlogits, &grads);
      if (adam.step(net, grads)) {
        res.diverged = true;
        net = best;
        return res;
      }
    }
    EpochLog log{epoch, total / std::max(1, train.size())};
    res.epochs_run = epoch;
    if (val_inputs) {
      double acc = 0;
      log.val_loss = mean_ce(net, *val_inputs, *val_labels, &acc);
      log.val_acc = acc;
      if (log.val_loss < res.best_val_loss) {
        res.best_val_loss = log.val_loss;
        res.best_epoch = epoch;
        best = net;
        since_best = 0;
      } else if (opt.patience > 0 && ++since_best >= opt.patience) {
        res.curve.push_back(log);
        break;
      }
    } else {
      best = net;
    }
    res.curve.push_back(log);
  }
  net = best;
  return res;
}

}  // namespace amortix
