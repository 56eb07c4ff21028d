#include "marlcomm/nn.hpp"

#include <cmath>
#include <sstream>

namespace marlcomm::nn {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

inline Vector sigmoid(const Vector& z) {
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

}  // namespace

Param& ParamSet::add(const std::string& name, Index rows, Index cols) {
  require(map_.count(name) == 0, "ParamSet: duplicate parameter name " + name);
  names_.push_back(name);
  Param p;
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  return map_.emplace(name, std::move(p)).first->second;
}

Param& ParamSet::at(const std::string& name) {
  auto it = map_.find(name);
  require(it != map_.end(), "ParamSet: unknown parameter " + name);
  return it->second;
}

const Param& ParamSet::at(const std::string& name) const {
  auto it = map_.find(name);
  require(it != map_.end(), "ParamSet: unknown parameter " + name);
  return it->second;
}

void ParamSet::zero_grad() {
  for (const auto& name : names_) map_[name].grad.setZero();
}

Index ParamSet::scalar_count() const {
  Index n = 0;
  for (const auto& name : names_) n += map_.at(name).value.size();
  return n;
}

Vector ParamSet::flatten_values() const {
  Vector out(scalar_count());
  Index at = 0;
  for (const auto& name : names_) {
    const Matrix& v = map_.at(name).value;
    out.segment(at, v.size()) = Eigen::Map<const Vector>(v.data(), v.size());
    at += v.size();
  }
  return out;
}

Vector ParamSet::flatten_grads() const {
  Vector out(scalar_count());
  Index at = 0;
  for (const auto& name : names_) {
    const Matrix& g = map_.at(name).grad;
    out.segment(at, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
    at += g.size();
  }
  return out;
}

void ParamSet::set_values(const Vector& flat) {
  require(flat.size() == scalar_count(), "ParamSet::set_values: size mismatch");
  Index at = 0;
  for (const auto& name : names_) {
    Matrix& v = map_[name].value;
    Eigen::Map<Vector>(v.data(), v.size()) = flat.segment(at, v.size());
    at += v.size();
  }
}

Vector affine(const Matrix& W, const Vector& b, const Vector& x) {
  if (W.cols() != x.size() || W.rows() != b.size()) {
    throw MarlError("affine: shape mismatch, W is " + shape_str(W) + ", x is " +
                    std::to_string(x.size()) + ", b is " +
                    std::to_string(b.size()));
  }
  Vector y = b;
  y.noalias() += W * x;
  return y;
}

void affine_backward(const Matrix& W, const Vector& x, const Vector& dy,
                     Matrix& dW, Vector& db, Vector& dx) {
  dW.noalias() += dy * x.transpose();
  db += dy;
  dx.noalias() += W.transpose() * dy;
}

LstmCache lstm_step(const Matrix& Wx, const Matrix& Wh, const Vector& b,
                    const Vector& x, const Vector& h, const Vector& c) {
  const Index H = h.size();
  if (Wx.rows() != 4 * H || Wh.rows() != 4 * H || Wh.cols() != H ||
      Wx.cols() != x.size() || b.size() != 4 * H || c.size() != H) {
    throw MarlError("lstm_step: shape mismatch, Wx is " + shape_str(Wx) +
                    ", Wh is " + shape_str(Wh) + ", x is " +
                    std::to_string(x.size()) + ", h is " + std::to_string(H));
  }
  Vector z = b;
  z.noalias() += Wx * x;
  z.noalias() += Wh * h;

  LstmCache cc;
  cc.x = x;
  cc.h_prev = h;
  cc.c_prev = c;
  cc.i = sigmoid(z.segment(0, H));
  cc.f = sigmoid(z.segment(H, H));
  cc.g = z.segment(2 * H, H).array().tanh();
  cc.o = sigmoid(z.segment(3 * H, H));
  cc.c_new = cc.f.cwiseProduct(c) + cc.i.cwiseProduct(cc.g);
  cc.tanh_c_new = cc.c_new.array().tanh();
  return cc;
}

Vector lstm_h(const LstmCache& cache) {
  return cache.o.cwiseProduct(cache.tanh_c_new);
}

void lstm_backward(const LstmCache& cc, const Matrix& Wx, const Matrix& Wh,
                   const Vector& dh_new, const Vector& dc_new, Matrix& dWx,
                   Matrix& dWh, Vector& db, Vector& dx, Vector& dh_prev,
                   Vector& dc_prev) {
  const Index H = cc.h_prev.size();

  // h' = o * tanh(c'), c' = f*c + i*g.
  const Vector d_o = dh_new.cwiseProduct(cc.tanh_c_new);
  Vector dc = dc_new;
  dc.array() += dh_new.array() * cc.o.array() *
                (1.0 - cc.tanh_c_new.array().square());

  const Vector d_f = dc.cwiseProduct(cc.c_prev);
  const Vector d_i = dc.cwiseProduct(cc.g);
  const Vector d_g = dc.cwiseProduct(cc.i);
  dc_prev += dc.cwiseProduct(cc.f);

  Vector dz(4 * H);
  dz.segment(0, H) = d_i.array() * cc.i.array() * (1.0 - cc.i.array());
  dz.segment(H, H) = d_f.array() * cc.f.array() * (1.0 - cc.f.array());
  dz.segment(2 * H, H) = d_g.array() * (1.0 - cc.g.array().square());
  dz.segment(3 * H, H) = d_o.array() * cc.o.array() * (1.0 - cc.o.array());

  dWx.noalias() += dz * cc.x.transpose();
  dWh.noalias() += dz * cc.h_prev.transpose();
  db += dz;
  dx.noalias() += Wx.transpose() * dz;
  dh_prev.noalias() += Wh.transpose() * dz;
}

double cosine(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), "cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  require(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
  return a.dot(b) / (na * nb);
}

void cosine_backward(const Vector& a, const Vector& b, double dcos,
                     Vector& da) {
  const double na = a.norm(), nb = b.norm();
  require(na > 0.0 && nb > 0.0, "cosine_backward: zero-norm input");
  const double inv = 1.0 / (na * nb);
  const double cos_ab = a.dot(b) * inv;
  da += dcos * (b * inv - a * (cos_ab / (na * na)));
}

Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  return e / e.sum();
}

double log_softmax_at(const Vector& logits, Index k) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits[k] - lse;
}

double softmax_entropy(const Vector& logits) {
  const Vector p = softmax(logits);
  double h = 0.0;
  for (Index j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
  }
  return h;
}

void softmax_entropy_backward(const Vector& logits, double dent,
                              Vector& dlogits) {
  // dH/dz_j = -p_j (log p_j + H).
  const Vector p = softmax(logits);
  double h = 0.0;
  for (Index j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) h -= p[j] * std::log(p[j]);
  }
  for (Index j = 0; j < p.size(); ++j) {
    const double logp = p[j] > 0.0 ? std::log(p[j]) : 0.0;
    dlogits[j] += dent * (-p[j] * (logp + h));
  }
}

void log_softmax_backward(const Vector& logits, Index k, double dlp,
                          Vector& dlogits) {
  const Vector p = softmax(logits);
  dlogits -= dlp * p;
  dlogits[k] += dlp;
}

SampleResult categorical_sample(const Vector& logits, RngStream& rng) {
  require(logits.size() >= 1, "categorical_sample: empty logits");
  require(logits.allFinite(), "categorical_sample: non-finite logits");
  const Vector p = softmax(logits);
  const double u = rng.uniform();
  double acc = 0.0;
  Index k = p.size() - 1;
  for (Index j = 0; j < p.size(); ++j) {
    acc += p[j];
    if (u < acc) {
      k = j;
      break;
    }
  }
  return {k, log_softmax_at(logits, k)};
}

SampleResult categorical_greedy(const Vector& logits) {
  require(logits.size() >= 1, "categorical_greedy: empty logits");
  Index k = 0;
  logits.maxCoeff(&k);
  return {k, log_softmax_at(logits, k)};
}

void Optimizer::step(ParamSet& params) {
  require(learning_rate > 0.0, "Optimizer: learning rate must be > 0");
  for (const auto& name : params.names()) {
    Param& p = params.at(name);
    if (!p.grad.allFinite()) {
      throw MarlError("Optimizer: non-finite gradient in parameter " + name);
    }
    switch (algo) {
      case OptAlgo::Sgd:
        p.value -= learning_rate * p.grad;
        break;
      case OptAlgo::RmsProp: {
        auto it = moments.find(name);
        if (it == moments.end()) {
          it = moments.emplace(name, Matrix::Zero(p.value.rows(),
                                                  p.value.cols()))
                   .first;
        }
        Matrix& v = it->second;
        v = rms_alpha * v + (1.0 - rms_alpha) * p.grad.cwiseProduct(p.grad);
        p.value.array() -=
            learning_rate * p.grad.array() / (v.array().sqrt() + rms_eps);
        break;
      }
    }
    p.grad.setZero();
  }
  ++step_count;
}

double clip_grad_norm(ParamSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& name : params.names()) {
    sq += params.at(name).grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& name : params.names()) params.at(name).grad *= scale;
  }
  return norm;
}

double grad_check(const std::function<double(ParamSet&, bool)>& loss_fn,
                  ParamSet& params, double eps) {
  params.zero_grad();
  loss_fn(params, true);
  const Vector analytic = params.flatten_grads();
  params.zero_grad();

  const Vector base = params.flatten_values();
  double worst = 0.0;
  for (Index j = 0; j < base.size(); ++j) {
    Vector v = base;
    v[j] = base[j] + eps;
    params.set_values(v);
    const double lp = loss_fn(params, false);
    v[j] = base[j] - eps;
    params.set_values(v);
    const double lm = loss_fn(params, false);
    const double numeric = (lp - lm) / (2.0 * eps);
    const double denom =
        std::max({1.0, std::abs(analytic[j]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
  }
  params.set_values(base);
  return worst;
}

}  // namespace marlcomm::nn
