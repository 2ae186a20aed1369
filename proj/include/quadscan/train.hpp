#pragma once

// Desk-scale training loop for the Micro variant on the synthetic quadrant
// task. Single-threaded and fully deterministic given the seed: parameter
// init, data, batch order, Gumbel noise and stochastic depth all draw from
// seeded generators in a fixed order.

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "synthetic.hpp"

namespace quadscan {

struct TrainOptions {
  int steps = 500;
  int batch = 32;
  double lr = 3e-3;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int n_train = 2048;
  int n_eval = 256;
  int eval_every = 100;
  // evaluation-mode forward during training: no Gumbel noise, no stochastic
  // depth. Used by tests that need bit-identical per-step computations.
  bool deterministic_forward = false;
};

inline std::uint64_t train_data_seed(std::uint64_t seed) { return seed * 1000 + 1; }
inline std::uint64_t eval_data_seed(std::uint64_t seed) { return seed * 1000 + 2; }

struct TrainReport {
  std::vector<double> step_losses;
  double initial_loss = 0;
  double final_loss = 0;  // mean over the last 10 steps
  double eval_accuracy = 0;
  double quadrant_agreement = 0;
  std::vector<int> eval_quadrant_decisions;  // first QuadVSS block, last eval
  double wall_seconds = 0;
  int steps = 0;
};

template <typename S>
class Optimizer {
 public:
  Optimizer(std::vector<Tensor<S>*> params, const TrainOptions& opt)
      : params_(std::move(params)), opt_(opt) {
    if (opt_.optimizer == "adam") {
      m_.resize(params_.size());
      v_.resize(params_.size());
      for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params_[i]->size()), S(0));
        v_[i].assign(static_cast<size_t>(params_[i]->size()), S(0));
      }
    } else if (opt_.optimizer == "sgd") {
      m_.resize(params_.size());
      for (size_t i = 0; i < params_.size(); ++i)
        m_[i].assign(static_cast<size_t>(params_[i]->size()), S(0));
    } else {
      throw std::runtime_error("optimizer must be adam or sgd: " + opt_.optimizer);
    }
  }

  void step() {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i]->param_data();
      auto& g = params_[i]->grad_mut();
      if (opt_.optimizer == "adam") {
        double bc1 = 1.0 - std::pow(opt_.beta1, t_);
        double bc2 = 1.0 - std::pow(opt_.beta2, t_);
        for (size_t k = 0; k < p.size(); ++k) {
          m_[i][k] = S(opt_.beta1 * m_[i][k] + (1 - opt_.beta1) * g[k]);
          v_[i][k] = S(opt_.beta2 * v_[i][k] + (1 - opt_.beta2) * double(g[k]) * g[k]);
          double mhat = m_[i][k] / bc1, vhat = v_[i][k] / bc2;
          p[k] -= S(opt_.lr * mhat / (std::sqrt(vhat) + opt_.adam_eps));
        }
      } else {
        for (size_t k = 0; k < p.size(); ++k) {
          m_[i][k] = S(opt_.momentum * m_[i][k] + g[k]);
          p[k] -= S(opt_.lr * m_[i][k]);
        }
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Tensor<S>*> params_;
  TrainOptions opt_;
  std::vector<std::vector<S>> m_, v_;
  long long t_ = 0;
};

struct EvalResult {
  double accuracy = 0;
  double agreement = 0;
  std::vector<int> first_block_quadrants;
};

inline EvalResult evaluate(Model<float>& model,
                           const std::vector<SyntheticSample>& samples) {
  EvalResult r;
  int correct = 0, agree = 0;
  for (const auto& s : samples) {
    std::vector<QuadDecision<float>> decisions;
    Tensor<float> logits =
        forward_classify(model, s.image, RunMode::eval, nullptr, &decisions);
    int pred = 0;
    for (int k = 1; k < logits.dim(0); ++k)
      if (logits.vals()[static_cast<size_t>(k)] > logits.vals()[static_cast<size_t>(pred)]) pred = k;
    if (pred == s.label) ++correct;
    if (!decisions.empty()) {
      r.first_block_quadrants.push_back(decisions.front().quadrant);
      if (decisions.front().quadrant == s.informative_quadrant) ++agree;
    }
  }
  r.accuracy = double(correct) / double(samples.size());
  r.agreement = r.first_block_quadrants.empty()
                    ? 0.0
                    : double(agree) / double(samples.size());
  return r;
}

inline TrainReport train(Model<float>& model, const TrainOptions& opt,
                         const std::vector<SyntheticSample>& train_set,
                         const std::vector<SyntheticSample>& eval_set,
                         std::uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<Tensor<float>*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  Optimizer<float> optim(params, opt);
  Rng order_rng(seed ^ 0xa02bdbf7bb3c0a7ULL);
  Rng noise_rng(seed ^ 0x6c62272e07bb0142ULL);

  TrainReport rep;
  rep.steps = opt.steps;
  for (int step = 0; step < opt.steps; ++step) {
    optim.zero_grad();
    double batch_loss = 0;
    for (int b = 0; b < opt.batch; ++b) {
      const auto& sample =
          train_set[static_cast<size_t>(order_rng.uniform_int(int(train_set.size())))];
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> logits = forward_classify(
          model, sample.image,
          opt.deterministic_forward ? RunMode::eval : RunMode::train, &noise_rng);
      Tensor<float> loss = scale(cross_entropy_logits(logits, sample.label),
                                 1.0f / float(opt.batch));
      backward(loss);
      batch_loss += double(loss.item()) * opt.batch;
    }
    batch_loss /= opt.batch;
    if (!std::isfinite(batch_loss))
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step));
    rep.step_losses.push_back(batch_loss);
    optim.step();
  }
  rep.initial_loss = rep.step_losses.empty() ? 0 : rep.step_losses.front();
  int tail = std::min<int>(10, int(rep.step_losses.size()));
  double acc = 0;
  for (int i = 0; i < tail; ++i)
    acc += rep.step_losses[rep.step_losses.size() - 1 - static_cast<size_t>(i)];
  rep.final_loss = tail > 0 ? acc / tail : 0;

  EvalResult ev = evaluate(model, eval_set);
  rep.eval_accuracy = ev.accuracy;
  rep.quadrant_agreement = ev.agreement;
  rep.eval_quadrant_decisions = ev.first_block_quadrants;
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace quadscan
