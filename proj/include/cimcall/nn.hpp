#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "taskgen.hpp"
#include "xbar.hpp"

namespace cimcall {

using Mat = Eigen::MatrixXd;

enum class LayerKind : uint32_t { Conv1d = 1, Recurrent = 2, Linear = 3, Activation = 4, Softmax = 5 };
enum class ActKind : uint32_t { Tanh = 0, Sigmoid = 1, Relu = 2 };

// Parameter tensors per kind (dense weights are in x out):
//   Conv1d     {W (k*cin x cout), b (1 x cout)}, unrolled row = kpos*cin + ch
//   Recurrent  {Wx (in x 2H), bx (1 x 2H), Uf (H x H), Uh (H x H)}; Wx columns [0,H) feed the gate
//   Linear     {W (in x out), b (1 x out)}
struct Layer {
  LayerKind kind = LayerKind::Linear;
  ActKind act = ActKind::Tanh;
  int k = 0;
  int in = 0;
  int out = 0;
  std::vector<Mat> params;
  std::vector<int> slots;  // model slot ids of the dense tensors, in product order
};

// A dense product routed through the VMM backend.
struct Slot {
  int layer = 0;
  int tensor = 0;
  double in_range = 1.0;  // max |input| used for the activation quantizer
  std::string name;
};

struct NetworkModel {
  std::vector<Layer> layers;
  std::vector<Slot> slots;
  QuantSpec quant = QuantSpec::float32();

  int in_dim() const { return layers.empty() ? 0 : layers.front().in; }
  int out_dim() const { return layers.empty() ? 0 : layers.back().out; }

  Mat& slot_weight(int s) { return layers[slots[s].layer].params[slots[s].tensor]; }
  const Mat& slot_weight(int s) const { return layers[slots[s].layer].params[slots[s].tensor]; }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& l : layers)
      for (const auto& p : l.params) n += static_cast<size_t>(p.size());
    return n;
  }
};

using GradientSet = std::vector<std::vector<Mat>>;

inline GradientSet zero_grads(const NetworkModel& m) {
  GradientSet g(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l)
    for (const auto& p : m.layers[l].params) g[l].push_back(Mat::Zero(p.rows(), p.cols()));
  return g;
}

namespace detail {
inline Mat xavier(int rows, int cols, int fan_in, int fan_out, RngStream& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Mat w(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) w(i, j) = a * (2.0 * rng.uniform() - 1.0);
  return w;
}
inline int add_slot(NetworkModel& m, int layer, int tensor, const std::string& name) {
  m.slots.push_back({layer, tensor, 1.0, name});
  m.layers[layer].slots.push_back(static_cast<int>(m.slots.size()) - 1);
  return static_cast<int>(m.slots.size()) - 1;
}
inline int chained_in(const NetworkModel& m, int requested) {
  if (m.layers.empty()) return requested;
  const int prev = m.layers.back().out;
  require_dims(requested == prev, "model: layer input does not match previous layer output");
  return prev;
}
}  // namespace detail

inline void add_conv1d(NetworkModel& m, int k, int cin, int cout, RngStream& rng, const std::string& name = "conv") {
  require(k >= 1 && k % 2 == 1, "conv1d: kernel size must be odd");
  Layer l;
  l.kind = LayerKind::Conv1d;
  l.k = k;
  l.in = detail::chained_in(m, cin);
  l.out = cout;
  l.params = {detail::xavier(k * cin, cout, k * cin, cout, rng), Mat::Zero(1, cout)};
  m.layers.push_back(std::move(l));
  detail::add_slot(m, static_cast<int>(m.layers.size()) - 1, 0, name);
}

inline void add_recurrent(NetworkModel& m, int in, int hidden, RngStream& rng, const std::string& prefix = "rec") {
  Layer l;
  l.kind = LayerKind::Recurrent;
  l.in = detail::chained_in(m, in);
  l.out = hidden;
  l.params = {detail::xavier(in, 2 * hidden, in, hidden, rng), Mat::Zero(1, 2 * hidden),
              detail::xavier(hidden, hidden, hidden, hidden, rng), detail::xavier(hidden, hidden, hidden, hidden, rng)};
  m.layers.push_back(std::move(l));
  const int li = static_cast<int>(m.layers.size()) - 1;
  detail::add_slot(m, li, 0, prefix + "_x");
  detail::add_slot(m, li, 2, prefix + "_f");
  detail::add_slot(m, li, 3, prefix + "_h");
}

inline void add_linear(NetworkModel& m, int in, int out, RngStream& rng, const std::string& name = "linear") {
  Layer l;
  l.kind = LayerKind::Linear;
  l.in = detail::chained_in(m, in);
  l.out = out;
  l.params = {detail::xavier(in, out, in, out, rng), Mat::Zero(1, out)};
  m.layers.push_back(std::move(l));
  detail::add_slot(m, static_cast<int>(m.layers.size()) - 1, 0, name);
}

inline void add_activation(NetworkModel& m, ActKind a) {
  require(!m.layers.empty(), "activation: needs a preceding layer");
  Layer l;
  l.kind = LayerKind::Activation;
  l.act = a;
  l.in = l.out = m.layers.back().out;
  m.layers.push_back(std::move(l));
}

inline void add_softmax(NetworkModel& m) {
  require(!m.layers.empty(), "softmax: needs a preceding layer");
  Layer l;
  l.kind = LayerKind::Softmax;
  l.in = l.out = m.layers.back().out;
  m.layers.push_back(std::move(l));
}

struct SurrogateShape {
  int kernel = 5;
  int channels = 8;
  int hidden = 16;
};

// conv1d(k=5, 1->8) -> tanh -> recurrent(16) -> linear(16->5) -> softmax
inline NetworkModel make_surrogate(RngStream& rng, const SurrogateShape& s = {}) {
  NetworkModel m;
  add_conv1d(m, s.kernel, 1, s.channels, rng);
  add_activation(m, ActKind::Tanh);
  add_recurrent(m, s.channels, s.hidden, rng);
  add_linear(m, s.hidden, kNumClasses, rng);
  add_softmax(m);
  return m;
}

// ---------------------------------------------------------------------------
// Quantization

inline double slot_weight_scale(const NetworkModel& m, int s) {
  return symmetric_scale(m.slot_weight(s).cwiseAbs().maxCoeff(), m.quant.weight_bits);
}
inline double slot_input_scale(const NetworkModel& m, int s) {
  return m.slots[s].in_range / static_cast<double>(qmax(m.quant.activation_bits));
}

inline Mat fake_quant_mat(const Mat& x, double scale, int bits) {
  return x.unaryExpr([scale, bits](double v) { return fake_quant(v, scale, bits); });
}

inline NetworkModel quantize_model(const NetworkModel& m, const QuantSpec& spec) {
  spec.validate();
  NetworkModel q = m;
  q.quant = spec;
  if (!spec.is_fixed()) return q;
  for (int s = 0; s < static_cast<int>(q.slots.size()); ++s) {
    const double sc = slot_weight_scale(q, s);
    q.slot_weight(s) = fake_quant_mat(q.slot_weight(s), sc, spec.weight_bits);
  }
  return q;
}

// Integer weights of a slot under the model's spec.
inline std::vector<int64_t> slot_int_weights(const NetworkModel& m, int s, double* scale_out = nullptr) {
  require(m.quant.is_fixed(), "slot_int_weights: model is not fixed point");
  const Mat& w = m.slot_weight(s);
  const double sc = slot_weight_scale(m, s);
  std::vector<int64_t> out(static_cast<size_t>(w.size()));
  for (int i = 0; i < w.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) out[static_cast<size_t>(i) * w.cols() + j] = quantize_int(w(i, j), sc, m.quant.weight_bits);
  if (scale_out) *scale_out = sc;
  return out;
}

// ---------------------------------------------------------------------------
// Backends

class DenseBackend {
 public:
  virtual ~DenseBackend() = default;
  // Y = Q(X) * W_slot, one product per row of X. If xq is given it receives
  // the quantized input actually multiplied.
  virtual void product(const NetworkModel& m, int slot, const Mat& X, Mat& Y, Mat* xq) = 0;
};

inline Mat quantize_input(const NetworkModel& m, int slot, const Mat& X) {
  if (!m.quant.is_fixed()) return X;
  return fake_quant_mat(X, slot_input_scale(m, slot), m.quant.activation_bits);
}

// Floating-point products with the model's (fake-)quantized weights, or with
// caller-supplied effective weights that are used as given.
class ExactBackend : public DenseBackend {
 public:
  explicit ExactBackend(const NetworkModel& m, const std::vector<Mat>* overrides = nullptr) {
    W_.reserve(m.slots.size());
    for (int s = 0; s < static_cast<int>(m.slots.size()); ++s) {
      if (overrides) {
        require_dims((*overrides)[s].rows() == m.slot_weight(s).rows() && (*overrides)[s].cols() == m.slot_weight(s).cols(),
                     "ExactBackend: override shape mismatch");
        W_.push_back((*overrides)[s]);
      } else if (m.quant.is_fixed()) {
        W_.push_back(fake_quant_mat(m.slot_weight(s), slot_weight_scale(m, s), m.quant.weight_bits));
      } else {
        W_.push_back(m.slot_weight(s));
      }
    }
  }
  const Mat& weight(int s) const { return W_[s]; }
  const std::vector<Mat>& weights() const { return W_; }

  void product(const NetworkModel& m, int slot, const Mat& X, Mat& Y, Mat* xq) override {
    if (m.quant.is_fixed()) {
      Mat q = quantize_input(m, slot, X);
      Y.noalias() = q * W_[slot];
      if (xq) *xq = std::move(q);
    } else {
      Y.noalias() = X * W_[slot];
      if (xq) *xq = X;
    }
  }

 private:
  std::vector<Mat> W_;
};

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerTrace {
  Mat in;
  Mat out;
  std::vector<Mat> aux;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

inline Mat unfold(const Mat& X, int k) {
  const int T = static_cast<int>(X.rows()), cin = static_cast<int>(X.cols()), pad = (k - 1) / 2;
  Mat U = Mat::Zero(T, k * cin);
  for (int t = 0; t < T; ++t)
    for (int p = 0; p < k; ++p) {
      const int src = t + p - pad;
      if (src < 0 || src >= T) continue;
      for (int ch = 0; ch < cin; ++ch) U(t, p * cin + ch) = X(src, ch);
    }
  return U;
}

inline Mat fold(const Mat& dU, int k, int cin) {
  const int T = static_cast<int>(dU.rows()), pad = (k - 1) / 2;
  Mat dX = Mat::Zero(T, cin);
  for (int t = 0; t < T; ++t)
    for (int p = 0; p < k; ++p) {
      const int src = t + p - pad;
      if (src < 0 || src >= T) continue;
      for (int ch = 0; ch < cin; ++ch) dX(src, ch) += dU(t, p * cin + ch);
    }
  return dX;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat softmax_rows(const Mat& Z) {
  Mat P(Z.rows(), Z.cols());
  for (int t = 0; t < Z.rows(); ++t) {
    const double mx = Z.row(t).maxCoeff();
    double s = 0.0;
    for (int c = 0; c < Z.cols(); ++c) s += (P(t, c) = std::exp(Z(t, c) - mx));
    P.row(t) /= s;
  }
  return P;
}

inline Mat layer_forward(const NetworkModel& m, int li, const Mat& X, DenseBackend& be, LayerTrace* tr) {
  const Layer& L = m.layers[li];
  require_dims(X.cols() == L.in, "forward: layer " + std::to_string(li) + " input width mismatch");
  const bool keep = tr != nullptr;
  Mat Y;
  switch (L.kind) {
    case LayerKind::Conv1d: {
      const Mat U = unfold(X, L.k);
      Mat uq;
      be.product(m, L.slots[0], U, Y, keep ? &uq : nullptr);
      Y.rowwise() += L.params[1].row(0);
      if (keep) tr->aux = {std::move(uq)};
      break;
    }
    case LayerKind::Linear: {
      Mat xq;
      be.product(m, L.slots[0], X, Y, keep ? &xq : nullptr);
      Y.rowwise() += L.params[1].row(0);
      if (keep) tr->aux = {std::move(xq)};
      break;
    }
    case LayerKind::Recurrent: {
      const int T = static_cast<int>(X.rows()), H = L.out;
      Mat Z, xq;
      be.product(m, L.slots[0], X, Z, keep ? &xq : nullptr);
      Z.rowwise() += L.params[1].row(0);
      Mat Hp(T, H), Hpq(T, H), F(T, H), Gq(T, H), C(T, H);
      Y.resize(T, H);
      Mat h = Mat::Zero(1, H), af, ac, q1, q2;
      for (int t = 0; t < T; ++t) {
        be.product(m, L.slots[1], h, af, keep ? &q1 : nullptr);
        Mat f(1, H);
        for (int j = 0; j < H; ++j) f(0, j) = sigmoid(Z(t, j) + af(0, j));
        const Mat g = f.cwiseProduct(h);
        be.product(m, L.slots[2], g, ac, keep ? &q2 : nullptr);
        Mat c(1, H), hn(1, H);
        for (int j = 0; j < H; ++j) {
          c(0, j) = std::tanh(Z(t, H + j) + ac(0, j));
          hn(0, j) = (1.0 - f(0, j)) * h(0, j) + f(0, j) * c(0, j);
        }
        if (keep) {
          Hp.row(t) = h;
          Hpq.row(t) = q1;
          F.row(t) = f;
          Gq.row(t) = q2;
          C.row(t) = c;
        }
        Y.row(t) = hn;
        h = hn;
      }
      if (keep) tr->aux = {std::move(xq), std::move(Hp), std::move(Hpq), std::move(F), std::move(Gq), std::move(C)};
      break;
    }
    case LayerKind::Activation:
      if (L.act == ActKind::Tanh) Y = X.array().tanh().matrix();
      else if (L.act == ActKind::Sigmoid) Y = X.unaryExpr([](double v) { return sigmoid(v); });
      else Y = X.cwiseMax(0.0);
      break;
    case LayerKind::Softmax:
      Y = softmax_rows(X);
      break;
  }
  if (keep) {
    tr->in = X;
    tr->out = Y;
  }
  return Y;
}

// Runs layers [0, upto) and returns the last output. With a trace, every
// layer's input, output and intermediates are kept for backward.
inline Mat forward_layers(const NetworkModel& m, const Mat& X, DenseBackend& be, ForwardTrace* tr, int upto = -1) {
  if (upto < 0) upto = static_cast<int>(m.layers.size());
  if (tr) tr->layers.assign(upto, {});
  Mat cur = X;
  for (int li = 0; li < upto; ++li) cur = layer_forward(m, li, cur, be, tr ? &tr->layers[li] : nullptr);
  return cur;
}

inline Mat signal_matrix(const std::vector<double>& signal) {
  Mat X(static_cast<int>(signal.size()), 1);
  for (size_t t = 0; t < signal.size(); ++t) X(static_cast<int>(t), 0) = signal[t];
  return X;
}

inline int receptive_field(const NetworkModel& m) {
  int rf = 1;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::Conv1d) rf += l.k - 1;
  return rf;
}

inline bool ends_with_softmax(const NetworkModel& m) {
  return !m.layers.empty() && m.layers.back().kind == LayerKind::Softmax;
}

// Per-frame class distribution.
inline Mat forward(const NetworkModel& m, const std::vector<double>& signal, DenseBackend& be) {
  require(static_cast<int>(signal.size()) >= receptive_field(m), "forward: signal shorter than receptive field");
  return forward_layers(m, signal_matrix(signal), be, nullptr);
}

// Logits (input of the final softmax) with a trace of every layer before it.
inline Mat forward_logits(const NetworkModel& m, const Mat& X, DenseBackend& be, ForwardTrace* tr) {
  require(ends_with_softmax(m), "forward_logits: model must end with softmax");
  return forward_layers(m, X, be, tr, static_cast<int>(m.layers.size()) - 1);
}

// Gradient of layer li given dY, with the weights the forward actually used.
inline Mat layer_backward(const NetworkModel& m, int li, const LayerTrace& tr, const ExactBackend& be, const Mat& dY,
                          std::vector<Mat>& grads) {
  const Layer& L = m.layers[li];
  switch (L.kind) {
    case LayerKind::Conv1d: {
      const Mat& W = be.weight(L.slots[0]);
      grads[0] += tr.aux[0].transpose() * dY;
      grads[1] += dY.colwise().sum();
      return fold(dY * W.transpose(), L.k, L.in);
    }
    case LayerKind::Linear: {
      const Mat& W = be.weight(L.slots[0]);
      grads[0] += tr.aux[0].transpose() * dY;
      grads[1] += dY.colwise().sum();
      return dY * W.transpose();
    }
    case LayerKind::Recurrent: {
      const int T = static_cast<int>(dY.rows()), H = L.out;
      const Mat& Wx = be.weight(L.slots[0]);
      const Mat& Uf = be.weight(L.slots[1]);
      const Mat& Uh = be.weight(L.slots[2]);
      const Mat &Xq = tr.aux[0], &Hp = tr.aux[1], &Hpq = tr.aux[2], &F = tr.aux[3], &Gq = tr.aux[4], &C = tr.aux[5];
      Mat dZ(T, 2 * H);
      Mat dh_next = Mat::Zero(1, H);
      for (int t = T - 1; t >= 0; --t) {
        const Mat dh = dY.row(t) + dh_next;
        Mat dac(1, H), df(1, H), dhp(1, H);
        for (int j = 0; j < H; ++j) {
          const double f = F(t, j), c = C(t, j), hp = Hp(t, j);
          dac(0, j) = dh(0, j) * f * (1.0 - c * c);
          df(0, j) = dh(0, j) * (c - hp);
          dhp(0, j) = dh(0, j) * (1.0 - f);
        }
        grads[3] += Gq.row(t).transpose() * dac;
        const Mat dg = dac * Uh.transpose();
        Mat daf(1, H);
        for (int j = 0; j < H; ++j) {
          df(0, j) += dg(0, j) * Hp(t, j);
          dhp(0, j) += dg(0, j) * F(t, j);
          daf(0, j) = df(0, j) * F(t, j) * (1.0 - F(t, j));
        }
        grads[2] += Hpq.row(t).transpose() * daf;
        dhp += daf * Uf.transpose();
        dZ.block(t, 0, 1, H) = daf;
        dZ.block(t, H, 1, H) = dac;
        dh_next = dhp;
      }
      grads[0] += Xq.transpose() * dZ;
      grads[1] += dZ.colwise().sum();
      return dZ * Wx.transpose();
    }
    case LayerKind::Activation: {
      const Mat& Y = tr.out;
      if (L.act == ActKind::Tanh) return dY.cwiseProduct((1.0 - Y.array().square()).matrix());
      if (L.act == ActKind::Sigmoid) return dY.cwiseProduct((Y.array() * (1.0 - Y.array())).matrix());
      return dY.cwiseProduct((tr.in.array() > 0.0).cast<double>().matrix());
    }
    case LayerKind::Softmax: {
      const Mat& P = tr.out;
      Mat dX(P.rows(), P.cols());
      for (int t = 0; t < P.rows(); ++t) {
        const double s = dY.row(t).dot(P.row(t));
        for (int c = 0; c < P.cols(); ++c) dX(t, c) = P(t, c) * (dY(t, c) - s);
      }
      return dX;
    }
  }
  return {};
}

// Backpropagates dOut through layers [0, trace size) and returns dInput.
inline Mat backward_layers(const NetworkModel& m, const ForwardTrace& tr, const ExactBackend& be, const Mat& dOut,
                           GradientSet& grads) {
  Mat d = dOut;
  for (int li = static_cast<int>(tr.layers.size()) - 1; li >= 0; --li)
    d = layer_backward(m, li, tr.layers[li], be, d, grads[li]);
  return d;
}

// ---------------------------------------------------------------------------
// Losses (mean over frames), each returns dLoss/dlogits in dz

inline double cross_entropy(const Mat& logits, const std::vector<int>& labels, Mat& dz) {
  require_dims(static_cast<int>(labels.size()) == logits.rows(), "cross_entropy: label/frame mismatch");
  const Mat P = softmax_rows(logits);
  const double n = static_cast<double>(logits.rows());
  dz = P / n;
  double loss = 0.0;
  for (int t = 0; t < logits.rows(); ++t) {
    loss -= std::log(std::max(P(t, labels[t]), 1e-300));
    dz(t, labels[t]) -= 1.0 / n;
  }
  return loss / n;
}

// lambda * CE(student, labels) + (1 - lambda) * T^2 * KL(softmax(t/T) || softmax(s/T))
inline double kd_loss(const Mat& s_logits, const Mat& t_logits, const std::vector<int>& labels, double temperature,
                      double lambda, Mat& dz) {
  if (!(temperature > 0.0)) throw PreconditionError("kd_loss: temperature must be > 0");
  require_dims(s_logits.rows() == t_logits.rows() && s_logits.cols() == t_logits.cols(), "kd_loss: shape mismatch");
  Mat dce;
  const double ce = lambda > 0.0 ? cross_entropy(s_logits, labels, dce) : 0.0;
  const Mat Ps = softmax_rows(s_logits / temperature), Pt = softmax_rows(t_logits / temperature);
  const double n = static_cast<double>(s_logits.rows());
  double kl = 0.0;
  for (int t = 0; t < Ps.rows(); ++t)
    for (int c = 0; c < Ps.cols(); ++c)
      if (Pt(t, c) > 0.0) kl += Pt(t, c) * (std::log(Pt(t, c)) - std::log(std::max(Ps(t, c), 1e-300)));
  kl /= n;
  const double T2 = temperature * temperature;
  dz = (1.0 - lambda) * temperature * (Ps - Pt) / n;
  if (lambda > 0.0) dz += lambda * dce;
  return (lambda > 0.0 ? lambda * ce : 0.0) + (1.0 - lambda) * T2 * kl;
}

// Loss and gradients of a softmax-terminated model under framewise CE.
inline std::pair<double, GradientSet> backward(const NetworkModel& m, const std::vector<double>& signal,
                                               const std::vector<int>& frame_labels) {
  require_dims(frame_labels.size() == signal.size(), "backward: labels length != output frames");
  ExactBackend be(m);
  ForwardTrace tr;
  const Mat z = forward_logits(m, signal_matrix(signal), be, &tr);
  Mat dz;
  const double loss = cross_entropy(z, frame_labels, dz);
  GradientSet g = zero_grads(m);
  backward_layers(m, tr, be, dz, g);
  return {loss, g};
}

inline double grad_norm(const GradientSet& g) {
  double s = 0.0;
  for (const auto& l : g)
    for (const auto& t : l) s += t.squaredNorm();
  return std::sqrt(s);
}

inline void sgd_step(NetworkModel& m, const GradientSet& g, double lr) {
  require(lr > 0.0 || lr == 0.0, "sgd_step: lr must be >= 0");
  require_dims(g.size() == m.layers.size(), "sgd_step: gradient set does not match model");
  for (const auto& l : g)
    for (const auto& t : l)
      if (!t.allFinite()) throw TrainingDivergenceError("sgd_step: non-finite gradient");
  if (lr == 0.0) return;
  for (size_t l = 0; l < g.size(); ++l) {
    require_dims(g[l].size() == m.layers[l].params.size(), "sgd_step: gradient set does not match model");
    for (size_t p = 0; p < g[l].size(); ++p) m.layers[l].params[p] -= lr * g[l][p];
  }
}

inline void round_to_float(NetworkModel& m) {
  for (auto& l : m.layers)
    for (auto& p : l.params) p = p.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

// Largest |input| seen by each slot over the data, float forward.
inline void calibrate_input_ranges(NetworkModel& m, const std::vector<SyntheticRead>& data) {
  NetworkModel f = m;
  f.quant = QuantSpec::float32();
  std::vector<double> mx(m.slots.size(), 0.0);
  class Probe : public DenseBackend {
   public:
    Probe(const NetworkModel& fm, std::vector<double>& out) : exact_(fm), out_(out) {}
    void product(const NetworkModel& mm, int slot, const Mat& X, Mat& Y, Mat* xq) override {
      if (X.size() > 0) out_[slot] = std::max(out_[slot], X.cwiseAbs().maxCoeff());
      exact_.product(mm, slot, X, Y, xq);
    }

   private:
    ExactBackend exact_;
    std::vector<double>& out_;
  } probe(f, mx);
  for (const auto& r : data) forward_layers(f, signal_matrix(r.signal), probe, nullptr);
  for (size_t s = 0; s < mx.size(); ++s) m.slots[s].in_range = mx[s] > 0.0 ? mx[s] : 1.0;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 15;
  double lr = 0.3;
  double clip_norm = 5.0;
  uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  int64_t steps = 0;
};

// Per-read SGD. `loss` maps logits to (loss, dlogits); `overrides` may fill
// effective weights for the step (noise injection), straight-through to the
// master weights; `filter` may mask gradients before the update.
using LossFn = std::function<double(const NetworkModel&, const Mat& logits, const SyntheticRead& r, size_t index, Mat& dz)>;
using OverrideFn = std::function<bool(const NetworkModel&, int epoch, int64_t step, std::vector<Mat>& w)>;
using GradFilter = std::function<void(GradientSet&)>;

inline TrainLog train_model(NetworkModel& m, const std::vector<SyntheticRead>& data, const TrainConfig& cfg,
                            const LossFn& loss_fn, const OverrideFn& overrides = nullptr,
                            const GradFilter& filter = nullptr) {
  require(cfg.epochs >= 1, "train: epochs must be >= 1");
  require(!data.empty(), "train: empty dataset");
  TrainLog log;
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Mat> w;
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    RngStream shuffle(cfg.seed, {0x5348554Cull, static_cast<uint64_t>(ep)});
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(0, static_cast<int64_t>(i) - 1)]);
    double total = 0.0;
    for (size_t idx : order) {
      const SyntheticRead& r = data[idx];
      const bool use = overrides && overrides(m, ep, log.steps, w);
      ExactBackend be(m, use ? &w : nullptr);
      ForwardTrace tr;
      const Mat z = forward_logits(m, signal_matrix(r.signal), be, &tr);
      Mat dz;
      const double l = loss_fn(m, z, r, idx, dz);
      if (!std::isfinite(l)) throw TrainingDivergenceError("train: non-finite loss");
      GradientSet g = zero_grads(m);
      backward_layers(m, tr, be, dz, g);
      if (filter) filter(g);
      const double gn = grad_norm(g);
      if (!std::isfinite(gn)) throw TrainingDivergenceError("train: non-finite gradient");
      if (cfg.clip_norm > 0.0 && gn > cfg.clip_norm)
        for (auto& lg : g)
          for (auto& t : lg) t *= cfg.clip_norm / gn;
      sgd_step(m, g, cfg.lr);
      total += l;
      ++log.steps;
    }
    log.epoch_loss.push_back(total / static_cast<double>(data.size()));
  }
  return log;
}

inline LossFn ce_loss() {
  return [](const NetworkModel&, const Mat& z, const SyntheticRead& r, size_t, Mat& dz) {
    return cross_entropy(z, r.frame_labels, dz);
  };
}

inline TrainLog train_supervised(NetworkModel& m, const std::vector<SyntheticRead>& data, const TrainConfig& cfg) {
  return train_model(m, data, cfg, ce_loss());
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "CIMCNET\0", u32 version, u32 weight bits, u32 activation
// bits, u32 mode, u32 layer count; per layer u32 kind, u32 act, u32 k, u32 in,
// u32 out, u32 tensor count, per tensor u32 rows, u32 cols, rows*cols f32
// (row-major); then u32 slot count, per slot f64 input range. Little-endian.

inline constexpr char kCheckpointMagic[8] = {'C', 'I', 'M', 'C', 'N', 'E', 'T', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const NetworkModel& m, const std::string& path) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw ConfigError("save_checkpoint: cannot open " + path);
  o.write(kCheckpointMagic, 8);
  detail::put_u32(o, kCheckpointVersion);
  detail::put_u32(o, static_cast<uint32_t>(m.quant.weight_bits));
  detail::put_u32(o, static_cast<uint32_t>(m.quant.activation_bits));
  detail::put_u32(o, m.quant.is_fixed() ? 1u : 0u);
  detail::put_u32(o, static_cast<uint32_t>(m.layers.size()));
  for (const auto& l : m.layers) {
    detail::put_u32(o, static_cast<uint32_t>(l.kind));
    detail::put_u32(o, static_cast<uint32_t>(l.act));
    detail::put_u32(o, static_cast<uint32_t>(l.k));
    detail::put_u32(o, static_cast<uint32_t>(l.in));
    detail::put_u32(o, static_cast<uint32_t>(l.out));
    detail::put_u32(o, static_cast<uint32_t>(l.params.size()));
    for (const auto& p : l.params) {
      detail::put_u32(o, static_cast<uint32_t>(p.rows()));
      detail::put_u32(o, static_cast<uint32_t>(p.cols()));
      for (int i = 0; i < p.rows(); ++i)
        for (int j = 0; j < p.cols(); ++j) {
          const float f = static_cast<float>(p(i, j));
          uint32_t u;
          std::memcpy(&u, &f, 4);
          detail::put_u32(o, u);
        }
    }
  }
  detail::put_u32(o, static_cast<uint32_t>(m.slots.size()));
  for (const auto& s : m.slots) detail::put_f64(o, s.in_range);
  if (!o) throw ConfigError("save_checkpoint: write failed for " + path);
}

inline NetworkModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ConfigError("load_checkpoint: bad magic in " + path);
  if (detail::get_u32(in) != kCheckpointVersion) throw ConfigError("load_checkpoint: unsupported version");
  NetworkModel m;
  m.quant.weight_bits = static_cast<int>(detail::get_u32(in));
  m.quant.activation_bits = static_cast<int>(detail::get_u32(in));
  m.quant.mode = detail::get_u32(in) ? QuantMode::Fixed : QuantMode::Float32;
  const uint32_t nl = detail::get_u32(in);
  RngStream dummy;
  for (uint32_t li = 0; li < nl; ++li) {
    const auto kind = static_cast<LayerKind>(detail::get_u32(in));
    const auto act = static_cast<ActKind>(detail::get_u32(in));
    const int k = static_cast<int>(detail::get_u32(in));
    const int lin = static_cast<int>(detail::get_u32(in));
    const int lout = static_cast<int>(detail::get_u32(in));
    switch (kind) {
      case LayerKind::Conv1d: add_conv1d(m, k, lin, lout, dummy); break;
      case LayerKind::Recurrent: add_recurrent(m, lin, lout, dummy); break;
      case LayerKind::Linear: add_linear(m, lin, lout, dummy); break;
      case LayerKind::Activation: add_activation(m, act); break;
      case LayerKind::Softmax: add_softmax(m); break;
      default: throw ConfigError("load_checkpoint: unknown layer kind");
    }
    Layer& l = m.layers.back();
    const uint32_t nt = detail::get_u32(in);
    if (nt != l.params.size()) throw ConfigError("load_checkpoint: tensor count mismatch");
    for (auto& p : l.params) {
      const uint32_t r = detail::get_u32(in), c = detail::get_u32(in);
      if (r != p.rows() || c != p.cols()) throw ConfigError("load_checkpoint: tensor shape mismatch");
      for (uint32_t i = 0; i < r; ++i)
        for (uint32_t j = 0; j < c; ++j) {
          const uint32_t u = detail::get_u32(in);
          float f;
          std::memcpy(&f, &u, 4);
          p(i, j) = f;
        }
    }
  }
  if (detail::get_u32(in) != m.slots.size()) throw ConfigError("load_checkpoint: slot count mismatch");
  for (auto& s : m.slots) s.in_range = detail::get_f64(in);
  return m;
}

}  // namespace cimcall
