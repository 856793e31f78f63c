#pragma once

// Small layer stack with hand-written backpropagation: dense layers and an
// LSTM cell whose hidden-to-hidden matrix is perturbable. Only weight
// matrices are perturbed; biases and the LSTM input weights are
// deterministic.

#include "flipout/core.hpp"
#include "flipout/perturb.hpp"
#include "flipout/prng.hpp"

#include <cmath>
#include <string>
#include <variant>
#include <vector>

namespace flipout {

enum class Activation { identity, relu, tanh, softmax_logits };
enum class Loss { softmax_cross_entropy, mean_squared_error };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::softmax_logits: return "softmax_logits";
  }
  return "?";
}

inline std::string to_string(Loss l) {
  return l == Loss::softmax_cross_entropy ? "softmax_cross_entropy" : "mean_squared_error";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "softmax_logits") return Activation::softmax_logits;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

inline Loss parse_loss(std::string_view s) {
  if (s == "softmax_cross_entropy") return Loss::softmax_cross_entropy;
  if (s == "mean_squared_error") return Loss::mean_squared_error;
  throw ConfigError("unknown loss '" + std::string(s) + "'");
}

struct DenseLayer {
  WeightDist dist;
  Vector bias;
  Activation activation = Activation::identity;

  Index input_size() const { return dist.rows(); }
  Index output_size() const { return dist.cols(); }
};

/// Gate blocks of the 4H columns are ordered (i, f, o, g). The cell reads
/// a row-flattened sequence [x_1 ... x_T] and emits h_T, or every h_t when
/// `return_sequences` is set.
struct LstmCell {
  Matrix input_weights;  // [d_in x 4H]
  WeightDist recurrent;  // [H x 4H]
  Vector bias;           // [4H]
  Index steps = 1;
  bool return_sequences = false;

  Index step_input_size() const { return input_weights.rows(); }
  Index hidden_size() const { return recurrent.rows(); }
  Index input_size() const { return steps * step_input_size(); }
  Index output_size() const { return return_sequences ? steps * hidden_size() : hidden_size(); }
};

using Layer = std::variant<DenseLayer, LstmCell>;

inline Index layer_input_size(const Layer& l) {
  return std::visit([](const auto& x) { return x.input_size(); }, l);
}
inline Index layer_output_size(const Layer& l) {
  return std::visit([](const auto& x) { return x.output_size(); }, l);
}
inline const WeightDist& layer_dist(const Layer& l) {
  if (const auto* d = std::get_if<DenseLayer>(&l)) return d->dist;
  return std::get<LstmCell>(l).recurrent;
}
inline WeightDist& layer_dist(Layer& l) {
  if (auto* d = std::get_if<DenseLayer>(&l)) return d->dist;
  return std::get<LstmCell>(l).recurrent;
}

struct Network {
  std::vector<Layer> layers;
  Loss loss = Loss::softmax_cross_entropy;

  Index input_size() const { return layers.empty() ? 0 : layer_input_size(layers.front()); }
  Index output_size() const { return layers.empty() ? 0 : layer_output_size(layers.back()); }

  void validate() const {
    if (layers.empty()) throw ConfigError("network has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::visit(
          [&](const auto& layer) {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, DenseLayer>) {
              layer.dist.validate();
              require_shape(layer.bias.size() == layer.dist.cols(), "layer " + std::to_string(l) + ": bias size");
              if (!layer.bias.allFinite()) throw ConfigError("layer " + std::to_string(l) + ": non-finite bias");
            } else {
              layer.recurrent.validate();
              const Index h = layer.hidden_size();
              require_shape(layer.recurrent.cols() == 4 * h, "lstm " + std::to_string(l) + ": recurrent must be [H x 4H]");
              require_shape(layer.input_weights.cols() == 4 * h, "lstm " + std::to_string(l) + ": input weights must be [d_in x 4H]");
              require_shape(layer.bias.size() == 4 * h, "lstm " + std::to_string(l) + ": bias size");
              if (layer.steps < 1) throw ConfigError("lstm " + std::to_string(l) + ": steps must be >= 1");
            }
          },
          layers[l]);
      if (l > 0)
        require_shape(layer_output_size(layers[l - 1]) == layer_input_size(layers[l]),
                      "layers " + std::to_string(l - 1) + " and " + std::to_string(l) + " do not conform");
    }
  }
};

// ---------------------------------------------------------------------------
// Initialization: Glorot-uniform means, zero biases, LSTM forget bias +1.

inline Matrix glorot_uniform(Index rows, Index cols, const RngKey& key, Index fan_in, Index fan_out) {
  RngStream rng(key);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>((2.0 * rng.uniform() - 1.0) * limit);
  return m;
}

/// For dropconnect the Glorot draw is the raw weight W and the mean is W/2.
inline WeightDist init_dist(Index d_in, Index d_out, Mode mode, Real scale, const RngKey& key) {
  Matrix mean = glorot_uniform(d_in, d_out, key, d_in, d_out);
  if (mode == Mode::dropconnect_half) mean *= Real(0.5);
  return make_dist(std::move(mean), scale, mode);
}

inline DenseLayer make_dense(Index d_in, Index d_out, Activation act, Mode mode, Real scale, const RngKey& key) {
  return DenseLayer{init_dist(d_in, d_out, mode, scale, key), Vector::Zero(d_out), act};
}

inline LstmCell make_lstm(Index d_in, Index hidden, Index steps, Mode mode, Real scale, const RngKey& key,
                          bool return_sequences = false) {
  LstmCell cell;
  cell.input_weights = glorot_uniform(d_in, 4 * hidden, key.split(0), d_in, 4 * hidden);
  cell.recurrent = init_dist(hidden, 4 * hidden, mode, scale, key.split(1));
  cell.bias = Vector::Zero(4 * hidden);
  cell.bias.segment(hidden, hidden).setConstant(Real(1));
  cell.steps = steps;
  cell.return_sequences = return_sequences;
  return cell;
}

/// widths = {d_in, h_1, ..., d_out}. Hidden layers use `hidden`; the output
/// layer emits logits for cross-entropy or identity for squared error.
inline Network make_mlp(const std::vector<Index>& widths, Activation hidden, Loss loss, Mode mode, Real scale,
                        const RngKey& key) {
  if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
  Network net;
  net.loss = loss;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const bool last = l + 2 == widths.size();
    const Activation act =
        last ? (loss == Loss::softmax_cross_entropy ? Activation::softmax_logits : Activation::identity) : hidden;
    net.layers.emplace_back(make_dense(widths[l], widths[l + 1], act, mode, scale, key.split(l)));
  }
  net.validate();
  return net;
}

// ---------------------------------------------------------------------------
// Targets and losses.

struct Targets {
  std::vector<int> labels;  // classification
  Matrix values;            // regression

  Index size() const { return labels.empty() ? values.rows() : static_cast<Index>(labels.size()); }
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index n = 0; n < logits.rows(); ++n) {
    const Real mx = logits.row(n).maxCoeff();
    p.row(n) = (logits.row(n).array() - mx).exp().matrix();
    p.row(n) /= p.row(n).sum();
  }
  return p;
}

/// Per-example loss values (cross-entropy or 0.5 |y - t|^2).
inline Vector example_losses(Loss loss, const Matrix& output, const Targets& targets) {
  Vector out(output.rows());
  if (loss == Loss::softmax_cross_entropy) {
    require_shape(static_cast<Index>(targets.labels.size()) == output.rows(), "loss: label count does not match batch");
    for (Index n = 0; n < output.rows(); ++n) {
      const int y = targets.labels[static_cast<std::size_t>(n)];
      require_shape(y >= 0 && y < output.cols(), "loss: label out of range");
      const Real mx = output.row(n).maxCoeff();
      const Real lse = mx + std::log((output.row(n).array() - mx).exp().sum());
      out(n) = lse - output(n, y);
    }
  } else {
    require_shape(targets.values.rows() == output.rows() && targets.values.cols() == output.cols(),
                  "loss: regression targets " + shape_of(targets.values) + " do not match output " + shape_of(output));
    out = Real(0.5) * (output - targets.values).rowwise().squaredNorm();
  }
  return out;
}

/// Fraction of rows whose argmax differs from the label.
inline double error_rate(const Matrix& logits, const std::vector<int>& labels) {
  Index wrong = 0;
  for (Index n = 0; n < logits.rows(); ++n) {
    Index arg;
    logits.row(n).maxCoeff(&arg);
    wrong += arg != labels[static_cast<std::size_t>(n)];
  }
  return logits.rows() ? static_cast<double>(wrong) / static_cast<double>(logits.rows()) : 0.0;
}

/// Mean loss over the batch and its gradient wrt the network output.
inline std::pair<Real, Matrix> loss_and_gradient(Loss loss, const Matrix& output, const Targets& targets) {
  const Real n = static_cast<Real>(output.rows());
  const Real value = example_losses(loss, output, targets).mean();
  Matrix grad;
  if (loss == Loss::softmax_cross_entropy) {
    grad = softmax_rows(output);
    for (Index i = 0; i < output.rows(); ++i) grad(i, targets.labels[static_cast<std::size_t>(i)]) -= Real(1);
  } else {
    grad = output - targets.values;
  }
  grad /= n;
  return {value, grad};
}

inline Matrix apply_activation(Activation act, const Matrix& pre) {
  switch (act) {
    case Activation::relu: return pre.cwiseMax(Real(0));
    case Activation::tanh: return pre.array().tanh().matrix();
    case Activation::identity:
    case Activation::softmax_logits: return pre;
  }
  return pre;
}

inline Matrix activation_backward(Activation act, const Matrix& pre, const Matrix& out, const Matrix& grad) {
  switch (act) {
    case Activation::relu: return (pre.array() > Real(0)).select(grad, Real(0));
    case Activation::tanh: return grad.cwiseProduct((Real(1) - out.array().square()).matrix());
    case Activation::identity:
    case Activation::softmax_logits: return grad;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Noise for a whole network.

struct NetNoise {
  Strategy strategy = Strategy::none;
  std::vector<LayerNoise> layers;
};

namespace noise_tag {
inline constexpr std::uint64_t base = 0, signs = 1, independent = 2, lrt = 3;
}

/// Draws the per-layer noise a strategy needs for a batch of `batch` rows.
/// Layer l uses key.split(l); base, signs, per-example and activation noise
/// use sub-keys 0, 1, 2, 3 of that.
inline NetNoise sample_noise(const Network& net, Index batch, Strategy strategy, const RngKey& key) {
  NetNoise noise;
  noise.strategy = strategy;
  noise.layers.resize(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const bool is_lstm = std::holds_alternative<LstmCell>(net.layers[l]);
    const WeightDist& dist = layer_dist(net.layers[l]);
    const RngKey lk = key.split(l);
    LayerNoise& ln = noise.layers[l];
    switch (strategy) {
      case Strategy::none: break;
      case Strategy::shared: ln.base = sample_base(dist, lk.split(noise_tag::base)); break;
      case Strategy::flipout:
        ln.base = sample_base(dist, lk.split(noise_tag::base));
        ln.signs = sample_sign_pair(lk.split(noise_tag::signs), batch, dist.rows(), dist.cols());
        break;
      case Strategy::independent: {
        const RngKey ik = lk.split(noise_tag::independent);
        ln.example_keys.reserve(static_cast<std::size_t>(batch));
        for (Index n = 0; n < batch; ++n) ln.example_keys.push_back(ik.split(static_cast<std::uint64_t>(n)));
        if (is_lstm) {
          for (const auto& k : ln.example_keys) ln.example_bases.push_back(sample_base(dist, k));
        }
        break;
      }
      case Strategy::lrt:
        if (is_lstm) throw ConfigError("lrt strategy does not apply to LSTM layers");
        if (dist.mode == Mode::dropconnect_half) throw ConfigError("lrt strategy requires a Gaussian mode");
        ln.activation_noise = sample_gaussian(lk.split(noise_tag::lrt), batch, dist.cols());
        break;
    }
  }
  return noise;
}

// ---------------------------------------------------------------------------
// LSTM step.

struct LstmStepCache {
  Matrix x, h_prev, c_prev;
  Matrix gates;  // [N x 4H] post-nonlinearity, blocks (i, f, o, g)
  Matrix c, tanh_c;
};

struct LstmStepResult {
  Matrix h, c;
  LstmStepCache cache;
};

inline Real sigmoid(Real z) { return Real(1) / (Real(1) + std::exp(-z)); }

/// One timestep. The recurrent product uses the strategy's forward rule with
/// the noise drawn once for the sequence, so a sequence sees one weight
/// sample W_n at every step.
inline LstmStepResult lstm_step(const LstmCell& cell, const Matrix& x_t, const Matrix& h_prev, const Matrix& c_prev,
                                Strategy strategy, const LayerNoise& noise) {
  const Index h = cell.hidden_size();
  require_shape(x_t.cols() == cell.step_input_size(), "lstm_step: input " + shape_of(x_t));
  require_shape(h_prev.cols() == h && c_prev.cols() == h && h_prev.rows() == x_t.rows() && c_prev.rows() == x_t.rows(),
                "lstm_step: state shapes " + shape_of(h_prev) + ", " + shape_of(c_prev));
  if (strategy == Strategy::lrt) throw ConfigError("lrt strategy does not apply to LSTM layers");
  Matrix z = matmul(x_t, cell.input_weights);
  z += perturbed_linear_forward(h_prev, cell.recurrent, strategy, noise);
  z.rowwise() += cell.bias.transpose();

  LstmStepResult r;
  Matrix& gates = r.cache.gates;
  gates.resize(z.rows(), z.cols());
  gates.leftCols(3 * h) = z.leftCols(3 * h).unaryExpr([](Real v) { return sigmoid(v); });
  gates.rightCols(h) = z.rightCols(h).array().tanh().matrix();
  const auto i = gates.leftCols(h);
  const auto f = gates.middleCols(h, h);
  const auto o = gates.middleCols(2 * h, h);
  const auto g = gates.rightCols(h);
  r.c = f.cwiseProduct(c_prev) + i.cwiseProduct(g);
  r.cache.tanh_c = r.c.array().tanh().matrix();
  r.h = o.cwiseProduct(r.cache.tanh_c);
  r.cache.x = x_t;
  r.cache.h_prev = h_prev;
  r.cache.c_prev = c_prev;
  r.cache.c = r.c;
  return r;
}

struct LstmStepGradients {
  Matrix d_x, d_h_prev, d_c_prev;
  Matrix d_input_weights, d_mean, d_scale;
  Vector d_bias;
};

/// Backward of lstm_step given dL/dh_t and dL/dc_t (the latter from t+1).
inline LstmStepGradients lstm_step_backward(const LstmCell& cell, Strategy strategy, const LayerNoise& noise,
                                            const LstmStepCache& cache, const Matrix& d_h, const Matrix& d_c_next) {
  const Index h = cell.hidden_size();
  const auto i = cache.gates.leftCols(h);
  const auto f = cache.gates.middleCols(h, h);
  const auto o = cache.gates.middleCols(2 * h, h);
  const auto g = cache.gates.rightCols(h);

  const Matrix d_o = d_h.cwiseProduct(cache.tanh_c);
  const Matrix d_c =
      d_c_next + d_h.cwiseProduct(o).cwiseProduct((Real(1) - cache.tanh_c.array().square()).matrix());
  Matrix dz(d_h.rows(), 4 * h);
  dz.leftCols(h) = d_c.cwiseProduct(g).cwiseProduct(i.cwiseProduct((Real(1) - i.array()).matrix()));
  dz.middleCols(h, h) = d_c.cwiseProduct(cache.c_prev).cwiseProduct(f.cwiseProduct((Real(1) - f.array()).matrix()));
  dz.middleCols(2 * h, h) = d_o.cwiseProduct(o.cwiseProduct((Real(1) - o.array()).matrix()));
  dz.rightCols(h) = d_c.cwiseProduct(i).cwiseProduct((Real(1) - g.array().square()).matrix());

  LstmStepGradients out;
  out.d_c_prev = d_c.cwiseProduct(f);
  out.d_input_weights = matmul(cache.x.transpose(), dz);
  out.d_x = matmul(dz, cell.input_weights.transpose());
  out.d_bias = dz.colwise().sum().transpose();
  LinearGradients rec = perturbed_linear_backward(dz, cache.h_prev, cell.recurrent, strategy, noise);
  out.d_h_prev = std::move(rec.d_input);
  out.d_mean = std::move(rec.d_mean);
  out.d_scale = std::move(rec.d_scale);
  return out;
}

// ---------------------------------------------------------------------------
// Network forward / backward.

struct DenseCache {
  Matrix input, pre, output, lrt_stddev;
};

struct LstmCache {
  std::vector<LstmStepCache> steps;
};

using LayerCache = std::variant<DenseCache, LstmCache>;

struct NetCache {
  NetNoise noise;
  std::vector<LayerCache> layers;
  Matrix output;
};

struct ForwardResult {
  Matrix output;
  NetCache cache;
};

inline ForwardResult net_forward_sampled(const Network& net, const Matrix& x, NetNoise noise) {
  require_shape(x.rows() >= 1, "net_forward: empty batch");
  require_shape(x.cols() == net.input_size(),
                "net_forward: input " + shape_of(x) + " does not match network input " + std::to_string(net.input_size()));
  require_shape(noise.layers.size() == net.layers.size(), "net_forward: noise does not match network depth");
  const Strategy strategy = noise.strategy;
  ForwardResult r;
  r.cache.layers.reserve(net.layers.size());
  Matrix act = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LayerNoise& ln = noise.layers[l];
    if (const auto* dense = std::get_if<DenseLayer>(&net.layers[l])) {
      DenseCache c;
      c.input = std::move(act);
      c.pre = perturbed_linear_forward(c.input, dense->dist, strategy, ln, &c.lrt_stddev);
      c.pre.rowwise() += dense->bias.transpose();
      c.output = apply_activation(dense->activation, c.pre);
      act = c.output;
      r.cache.layers.emplace_back(std::move(c));
    } else {
      const auto& cell = std::get<LstmCell>(net.layers[l]);
      if (strategy == Strategy::lrt) throw ConfigError("lrt strategy does not apply to LSTM layers");
      const Index d = cell.step_input_size(), hsz = cell.hidden_size();
      LstmCache c;
      Matrix h = Matrix::Zero(act.rows(), hsz), cs = Matrix::Zero(act.rows(), hsz);
      Matrix seq(cell.return_sequences ? act.rows() : 0, cell.return_sequences ? cell.steps * hsz : 0);
      for (Index t = 0; t < cell.steps; ++t) {
        LstmStepResult s = lstm_step(cell, act.middleCols(t * d, d), h, cs, strategy, ln);
        h = std::move(s.h);
        cs = std::move(s.c);
        if (cell.return_sequences) seq.middleCols(t * hsz, hsz) = h;
        c.steps.push_back(std::move(s.cache));
      }
      act = cell.return_sequences ? std::move(seq) : std::move(h);
      r.cache.layers.emplace_back(std::move(c));
    }
  }
  r.output = act;
  r.cache.output = std::move(act);
  r.cache.noise = std::move(noise);
  return r;
}

inline ForwardResult net_forward(const Network& net, const Matrix& x, Strategy strategy, const RngKey& key) {
  return net_forward_sampled(net, x, sample_noise(net, x.rows(), strategy, key));
}

struct LayerGradient {
  Matrix d_mean;
  Matrix d_scale;
  Matrix d_input_weights;  // LSTM only
  Vector d_bias;
};

using Gradients = std::vector<LayerGradient>;

struct BackwardResult {
  Real loss = 0;
  Gradients grads;
  // dL/d(pre-activation) of each dense layer; filled on request.
  std::vector<Matrix> deltas;
};

inline BackwardResult net_backward(const Network& net, const NetCache& cache, const Targets& targets,
                                   bool keep_deltas = false) {
  require_shape(cache.layers.size() == net.layers.size() && cache.noise.layers.size() == net.layers.size(),
                "net_backward: cache does not match network");
  require_shape(targets.size() == cache.output.rows(), "net_backward: targets do not match batch");
  const Strategy strategy = cache.noise.strategy;
  BackwardResult r;
  auto [loss, grad] = loss_and_gradient(net.loss, cache.output, targets);
  r.loss = loss;
  r.grads.resize(net.layers.size());
  if (keep_deltas) r.deltas.resize(net.layers.size());
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const LayerNoise& ln = cache.noise.layers[li];
    LayerGradient& lg = r.grads[li];
    if (const auto* dense = std::get_if<DenseLayer>(&net.layers[li])) {
      const auto* c = std::get_if<DenseCache>(&cache.layers[li]);
      require_shape(c != nullptr, "net_backward: cache layer kind mismatch");
      require_shape(c->output.rows() == grad.rows() && c->output.cols() == grad.cols(), "net_backward: cache shape mismatch");
      const Matrix delta = activation_backward(dense->activation, c->pre, c->output, grad);
      LinearGradients g = perturbed_linear_backward(delta, c->input, dense->dist, strategy, ln, c->lrt_stddev);
      lg.d_mean = std::move(g.d_mean);
      lg.d_scale = std::move(g.d_scale);
      lg.d_bias = delta.colwise().sum().transpose();
      grad = std::move(g.d_input);
      if (keep_deltas) r.deltas[li] = delta;
    } else {
      const auto& cell = std::get<LstmCell>(net.layers[li]);
      const auto* c = std::get_if<LstmCache>(&cache.layers[li]);
      require_shape(c != nullptr && static_cast<Index>(c->steps.size()) == cell.steps,
                    "net_backward: cache layer kind mismatch");
      const Index hsz = cell.hidden_size(), d = cell.step_input_size(), rows = grad.rows();
      lg.d_mean = Matrix::Zero(cell.recurrent.rows(), cell.recurrent.cols());
      lg.d_scale = Matrix::Zero(cell.recurrent.rows(), cell.recurrent.cols());
      lg.d_input_weights = Matrix::Zero(cell.input_weights.rows(), cell.input_weights.cols());
      lg.d_bias = Vector::Zero(cell.bias.size());
      Matrix d_in(rows, cell.steps * d);
      Matrix d_h = cell.return_sequences ? Matrix::Zero(rows, hsz) : grad;
      Matrix d_c = Matrix::Zero(rows, hsz);
      for (Index t = cell.steps; t-- > 0;) {
        if (cell.return_sequences) d_h += grad.middleCols(t * hsz, hsz);
        LstmStepGradients sg =
            lstm_step_backward(cell, strategy, ln, c->steps[static_cast<std::size_t>(t)], d_h, d_c);
        lg.d_mean += sg.d_mean;
        lg.d_scale += sg.d_scale;
        lg.d_input_weights += sg.d_input_weights;
        lg.d_bias += sg.d_bias;
        d_in.middleCols(t * d, d) = sg.d_x;
        d_h = std::move(sg.d_h_prev);
        d_c = std::move(sg.d_c_prev);
      }
      grad = std::move(d_in);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Named weight blocks, used to report gradient statistics per matrix.

struct WeightView {
  std::string name;
  std::size_t layer = 0;
  Index col_begin = 0;
  Index col_count = 0;
  Index rows = 0;

  Index size() const { return rows * col_count; }
};

/// Dense layers are "fc1", "fc2", ...; each LSTM contributes its four
/// hidden-to-hidden gate blocks "lstm1.W_i", "lstm1.W_f", "lstm1.W_o",
/// "lstm1.W_g".
inline std::vector<WeightView> weight_views(const Network& net) {
  std::vector<WeightView> views;
  int dense_count = 0, lstm_count = 0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    if (const auto* d = std::get_if<DenseLayer>(&net.layers[l])) {
      views.push_back({"fc" + std::to_string(++dense_count), l, 0, d->dist.cols(), d->dist.rows()});
    } else {
      const auto& cell = std::get<LstmCell>(net.layers[l]);
      const std::string prefix = "lstm" + std::to_string(++lstm_count) + ".W_";
      const Index h = cell.hidden_size();
      const char gates[] = {'i', 'f', 'o', 'g'};
      for (int k = 0; k < 4; ++k) views.push_back({prefix + gates[k], l, k * h, h, h});
    }
  }
  return views;
}

inline const WeightView& find_view(const std::vector<WeightView>& views, const std::string& name) {
  for (const auto& v : views)
    if (v.name == name) return v;
  throw ConfigError("no weight matrix named '" + name + "'");
}

/// Mean-gradient block of a view, flattened row-major.
inline Eigen::Map<const RowVector> view_flat(const Matrix& block) {
  return Eigen::Map<const RowVector>(block.data(), block.size());
}

inline Matrix view_block(const Gradients& grads, const WeightView& v) {
  return grads[v.layer].d_mean.middleCols(v.col_begin, v.col_count);
}

// ---------------------------------------------------------------------------
// Per-example gradients of one weight view (gradient of the single-example
// loss, i.e. scaled by the batch size), one example per row.

inline NetNoise slice_noise(const NetNoise& noise, Index row) {
  NetNoise out;
  out.strategy = noise.strategy;
  for (const LayerNoise& ln : noise.layers) {
    LayerNoise s;
    s.base = ln.base;
    if (ln.signs.r.size() > 0) s.signs = {ln.signs.r.row(row), ln.signs.s.row(row)};
    if (!ln.example_keys.empty()) s.example_keys = {ln.example_keys[static_cast<std::size_t>(row)]};
    if (!ln.example_bases.empty()) s.example_bases = {ln.example_bases[static_cast<std::size_t>(row)]};
    if (ln.activation_noise.size() > 0) s.activation_noise = ln.activation_noise.row(row);
    out.layers.push_back(std::move(s));
  }
  return out;
}

inline Targets slice_targets(const Targets& t, Index row) {
  Targets out;
  if (!t.labels.empty()) out.labels = {t.labels[static_cast<std::size_t>(row)]};
  if (t.values.size() > 0) out.values = t.values.row(row);
  return out;
}

inline Matrix per_example_gradients(const Network& net, const Matrix& x, const Targets& targets, const NetNoise& noise,
                                    const WeightView& view) {
  const Index n = x.rows();
  Matrix out(n, view.size());
  if (const auto* dense = std::get_if<DenseLayer>(&net.layers[view.layer])) {
    const ForwardResult fr = net_forward_sampled(net, x, noise);
    const BackwardResult br = net_backward(net, fr.cache, targets, true);
    const auto& c = std::get<DenseCache>(fr.cache.layers[view.layer]);
    const Matrix& delta = br.deltas[view.layer];
    const LayerNoise& ln = noise.layers[view.layer];
    const WeightDist& dist = dense->dist;
    const Real scale = static_cast<Real>(n);
    Matrix var;
    if (noise.strategy == Strategy::lrt && dist.mode == Mode::multiplicative_gaussian) var = weight_variance(dist);
    for (Index e = 0; e < n; ++e) {
      const RowVector xe = c.input.row(e);
      const RowVector de = delta.row(e) * scale;
      Matrix direct = xe.transpose() * de;
      Matrix g;
      switch (noise.strategy) {
        case Strategy::none: g = std::move(direct); break;
        case Strategy::shared: g = chain_to_params(dist, ln.base.noise, direct, direct).d_mean; break;
        case Strategy::flipout: {
          const Matrix gb = (xe.cwiseProduct(ln.signs.s.row(e))).transpose() * de.cwiseProduct(ln.signs.r.row(e));
          g = chain_to_params(dist, ln.base.noise, direct, gb).d_mean;
          break;
        }
        case Strategy::independent: {
          const BasePerturbation b = example_base(dist, ln, e);
          g = chain_to_params(dist, b.noise, direct, direct).d_mean;
          break;
        }
        case Strategy::lrt: {
          g = std::move(direct);
          if (dist.mode == Mode::multiplicative_gaussian) {
            RowVector gv = RowVector::Zero(de.size());
            for (Index j = 0; j < de.size(); ++j)
              if (c.lrt_stddev(e, j) > Real(0))
                gv(j) = de(j) * ln.activation_noise(e, j) / (Real(2) * c.lrt_stddev(e, j));
            const Matrix gw = xe.cwiseAbs2().transpose() * gv;
            g += Real(2) * gw.cwiseProduct(dist.scale.cwiseAbs2()).cwiseProduct(dist.mean);
          }
          break;
        }
      }
      const Matrix block = g.middleCols(view.col_begin, view.col_count);
      out.row(e) = view_flat(block);
    }
    return out;
  }
  for (Index e = 0; e < n; ++e) {
    const ForwardResult fr = net_forward_sampled(net, x.row(e), slice_noise(noise, e));
    const BackwardResult br = net_backward(net, fr.cache, slice_targets(targets, e));
    const Matrix block = view_block(br.grads, view);
    out.row(e) = view_flat(block);
  }
  return out;
}

}  // namespace flipout
