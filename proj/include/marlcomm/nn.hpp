#pragma once

#include "marlcomm/core.hpp"
#include "marlcomm/rng.hpp"

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace marlcomm::nn {

// One named parameter tensor with a same-shape gradient slot. Vectors are
// stored as single-column matrices.
struct Param {
  Matrix value;
  Matrix grad;
};

// Named parameter store. Iteration order is insertion order everywhere
// (optimizer, checkpointing, flatten), which keeps updates and serialized
// files deterministic.
class ParamSet {
 public:
  Param& add(const std::string& name, Index rows, Index cols);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const { return map_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }

  void zero_grad();
  Index scalar_count() const;

  // Concatenation over parameters in insertion order, each tensor in its
  // native (column-major) storage order.
  Vector flatten_values() const;
  Vector flatten_grads() const;
  void set_values(const Vector& flat);

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Param> map_;
};

// ---------------------------------------------------------------------------
// Forward/backward kernels. Composition order for the backward pass is fixed:
// callers run forwards in program order, keep the caches, and invoke the
// matching *_backward in exact reverse order, accumulating into gradient
// slots (+=) and into upstream d-vectors.
// ---------------------------------------------------------------------------

// y = W x + b.
Vector affine(const Matrix& W, const Vector& b, const Vector& x);

// Accumulates dW += dy x^T, db += dy, dx += W^T dy.
void affine_backward(const Matrix& W, const Vector& x, const Vector& dy,
                     Matrix& dW, Vector& db, Vector& dx);

// Gate order in the stacked pre-activation is [input, forget, candidate,
// output]: i = sigmoid, f = sigmoid, g = tanh, o = sigmoid,
// c' = f*c + i*g, h' = o*tanh(c').
struct LstmCache {
  Vector x, h_prev, c_prev;
  Vector i, f, g, o;
  Vector c_new, tanh_c_new;
};

// Wx is 4H x n, Wh is 4H x H, b is 4H. Returns the cache; h' and c' are
// cache.o.cwiseProduct(cache.tanh_c_new) and cache.c_new.
LstmCache lstm_step(const Matrix& Wx, const Matrix& Wh, const Vector& b,
                    const Vector& x, const Vector& h, const Vector& c);
Vector lstm_h(const LstmCache& cache);

// Accumulates into all six gradient outputs.
void lstm_backward(const LstmCache& cache, const Matrix& Wx, const Matrix& Wh,
                   const Vector& dh_new, const Vector& dc_new, Matrix& dWx,
                   Matrix& dWh, Vector& db, Vector& dx, Vector& dh_prev,
                   Vector& dc_prev);

// a.b / (|a||b|). Throws on a zero-norm input.
double cosine(const Vector& a, const Vector& b);

// Accumulates da += dcos * d cosine / d a (b treated as constant).
void cosine_backward(const Vector& a, const Vector& b, double dcos, Vector& da);

Vector softmax(const Vector& logits);
double log_softmax_at(const Vector& logits, Index k);

// Entropy of softmax(logits); backward accumulates into dlogits.
double softmax_entropy(const Vector& logits);
void softmax_entropy_backward(const Vector& logits, double dent,
                              Vector& dlogits);

// d/dlogits of log softmax(logits)[k], scaled by dlp, accumulated.
void log_softmax_backward(const Vector& logits, Index k, double dlp,
                          Vector& dlogits);

struct SampleResult {
  Index index = 0;
  double logprob = 0.0;
};

// Samples from softmax(logits) using one uniform draw; greedy returns the
// argmax (lowest index on ties). logprob is log softmax(logits)[index].
SampleResult categorical_sample(const Vector& logits, RngStream& rng);
SampleResult categorical_greedy(const Vector& logits);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

enum class OptAlgo { Sgd, RmsProp };

// RMSprop defaults follow the recurrent-comm lineage this architecture
// borrows from: alpha = 0.97, eps = 1e-6.
struct Optimizer {
  OptAlgo algo = OptAlgo::RmsProp;
  double learning_rate = 1e-3;
  double rms_alpha = 0.97;
  double rms_eps = 1e-6;
  std::int64_t step_count = 0;
  std::unordered_map<std::string, Matrix> moments;

  // Applies one update in place, zeroes gradient slots, bumps step_count.
  // Throws if any gradient entry is not finite, naming the parameter.
  void step(ParamSet& params);
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
double clip_grad_norm(ParamSet& params, double max_norm);

// Compares analytic gradients against central finite differences of step eps.
// loss_fn(params, accumulate) returns the loss; when accumulate is true it
// must also add gradients into the grad slots. Returns the maximum of
// |ga - gn| / max(1, |ga|, |gn|) over every parameter entry.
double grad_check(const std::function<double(ParamSet&, bool)>& loss_fn,
                  ParamSet& params, double eps);

}  // namespace marlcomm::nn
