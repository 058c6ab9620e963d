#include "chprune/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "chprune/kernels.hpp"

namespace chprune {

template <typename T>
const NodeParams<T>& Weights<T>::at(const NodeId& id) const {
  auto it = nodes.find(id);
  if (it == nodes.end()) throw Error(ErrorCode::MissingWeights, "no weights for node '" + id + "'");
  return it->second;
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  Weights<U> out;
  out.version = version;
  auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
  for (const auto& [id, p] : nodes)
    out.nodes[id] = NodeParams<U>{conv(p.weight), conv(p.bias), conv(p.gamma), conv(p.beta), conv(p.running_mean),
                                  conv(p.running_var)};
  return out;
}

template <typename T>
Weights<T> init_weights(const Graph& graph, uint64_t seed) {
  ShapeMap shapes = infer_shapes(graph, 1);
  std::mt19937_64 rng(seed);
  Weights<T> w;
  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    NodeParams<T> p;
    if (n.kind == OpKind::Convolution) {
      const auto& a = n.conv();
      int64_t fan_in = a.in_channels * a.kernel_size();
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      p.weight.resize(static_cast<size_t>(a.out_channels * fan_in));
      for (auto& v : p.weight) v = static_cast<T>(dist(rng));
      if (a.bias) p.bias.assign(static_cast<size_t>(a.out_channels), T(0));
    } else if (n.kind == OpKind::FullyConnected) {
      const auto& a = n.fc();
      std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(a.in_channels)));
      p.weight.resize(static_cast<size_t>(a.out_channels * a.in_channels));
      for (auto& v : p.weight) v = static_cast<T>(dist(rng));
      p.bias.assign(static_cast<size_t>(a.out_channels), T(0));
    } else if (n.kind == OpKind::BatchNorm) {
      auto c = static_cast<size_t>(shapes.at(n.id).channels);
      p.gamma.assign(c, T(1));
      p.beta.assign(c, T(0));
      p.running_mean.assign(c, T(0));
      p.running_var.assign(c, T(1));
    } else {
      continue;
    }
    w.nodes[n.id] = std::move(p);
  }
  return w;
}

namespace {

kernels::Conv2dGeometry geometry(const ConvAttrs& a, const TensorShape& in, const TensorShape& out) {
  if (in.spatial.size() != 2)
    throw Error(ErrorCode::UnsupportedOperator, "convolution executor supports 2-d spatial inputs only");
  return kernels::Conv2dGeometry{in.batch,    a.in_channels, in.spatial[0], in.spatial[1], a.out_channels,
                                 a.kernel[0], a.kernel[1],   a.stride,      a.padding,     out.spatial[0],
                                 out.spatial[1]};
}

void require_size(const NodeId& id, size_t have, int64_t want, const char* what) {
  if (static_cast<int64_t>(have) != want)
    throw Error(ErrorCode::MissingWeights,
                "node '" + id + "': " + what + " has " + std::to_string(have) + " values, expected " + std::to_string(want));
}

template <typename T>
void check_params(const OperatorNode& n, const NodeParams<T>& p, int64_t channels) {
  if (n.kind == OpKind::Convolution) {
    const auto& a = n.conv();
    require_size(n.id, p.weight.size(), a.out_channels * a.in_channels * a.kernel_size(), "kernel");
    if (a.bias) require_size(n.id, p.bias.size(), a.out_channels, "bias");
  } else if (n.kind == OpKind::FullyConnected) {
    const auto& a = n.fc();
    require_size(n.id, p.weight.size(), a.out_channels * a.in_channels, "weight");
    require_size(n.id, p.bias.size(), a.out_channels, "bias");
  } else if (n.kind == OpKind::BatchNorm) {
    require_size(n.id, p.gamma.size(), channels, "gamma");
    require_size(n.id, p.beta.size(), channels, "beta");
    require_size(n.id, p.running_mean.size(), channels, "running mean");
    require_size(n.id, p.running_var.size(), channels, "running var");
  }
}

}  // namespace

template <typename T>
Tape<T> forward(const Graph& graph, const Coloring& coloring, const GateSet& gates, Weights<T>& weights,
                const Tensor<T>& input, const ForwardOptions& options) {
  if (static_cast<int64_t>(input.data.size()) != input.shape.elements())
    throw Error(ErrorCode::ShapeMismatch, "input data does not match its shape");
  ShapeMap shapes = infer_shapes(graph, input.shape);
  const size_t count = graph.size();

  Tape<T> tape;
  tape.graph = &graph;
  tape.coloring = &coloring;
  tape.training = options.training;
  tape.bn_eps = options.bn_eps;
  tape.gate_mode = options.gate_mode;
  tape.steepness = gates.steepness;
  tape.weights_version = weights.version;
  tape.outputs.resize(count);
  tape.pre_gate.resize(count);
  tape.gate.resize(count);
  tape.gate_group.assign(count, -1);
  tape.bn_mean.resize(count);
  tape.bn_invstd.resize(count);
  tape.pool_argmax.resize(count);
  tape.silenced.assign(count, false);
  if (options.gate_mode == GateMode::Relaxed) tape.gate_parameters = gates.values;

  for (size_t idx : graph.topo_order()) {
    const auto& n = graph.nodes()[idx];
    const TensorShape& shape = shapes.at(n.id);
    Tensor<T> out(shape);
    auto in = [&](size_t slot) -> const Tensor<T>& { return tape.outputs[graph.index_of(n.inputs[slot])]; };

    if (options.silenced && options.silenced->count(n.id)) {
      tape.silenced[idx] = true;
      tape.outputs[idx] = std::move(out);
      continue;
    }

    switch (n.kind) {
      case OpKind::Input:
        out = input;
        break;
      case OpKind::Output:
      case OpKind::ReLU: {
        const auto& x = in(0);
        if (n.kind == OpKind::Output) {
          out = x;
        } else {
          for (size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
        }
        break;
      }
      case OpKind::Convolution: {
        const auto& p = weights.at(n.id);
        check_params(n, p, shape.channels);
        auto g = geometry(n.conv(), in(0).shape, shape);
        kernels::conv2d_forward(g, in(0).data.data(), p.weight.data(), p.bias.empty() ? nullptr : p.bias.data(),
                                out.data.data());
        break;
      }
      case OpKind::FullyConnected: {
        const auto& p = weights.at(n.id);
        check_params(n, p, shape.channels);
        const auto& a = n.fc();
        kernels::linear_forward(shape.batch, a.in_channels, a.out_channels, in(0).data.data(), p.weight.data(),
                                p.bias.data(), out.data.data());
        break;
      }
      case OpKind::BatchNorm: {
        auto it = weights.nodes.find(n.id);
        if (it == weights.nodes.end()) throw Error(ErrorCode::MissingWeights, "no weights for node '" + n.id + "'");
        auto& p = it->second;
        check_params(n, p, shape.channels);
        const auto& x = in(0);
        const int64_t plane = x.plane();
        const double count_per_channel = static_cast<double>(shape.batch * plane);
        auto& mean = tape.bn_mean[idx];
        auto& invstd = tape.bn_invstd[idx];
        mean.assign(static_cast<size_t>(shape.channels), 0.0);
        invstd.assign(static_cast<size_t>(shape.channels), 0.0);
        for (int64_t c = 0; c < shape.channels; ++c) {
          double mu, var;
          if (options.training) {
            double s = 0, s2 = 0;
            for (int64_t b = 0; b < shape.batch; ++b) {
              const T* xp = x.channel(b, c);
              for (int64_t i = 0; i < plane; ++i) s += xp[i];
            }
            mu = s / count_per_channel;
            for (int64_t b = 0; b < shape.batch; ++b) {
              const T* xp = x.channel(b, c);
              for (int64_t i = 0; i < plane; ++i) {
                double d = xp[i] - mu;
                s2 += d * d;
              }
            }
            var = s2 / count_per_channel;
            if (options.update_running_stats) {
              double unbiased = count_per_channel > 1 ? var * count_per_channel / (count_per_channel - 1) : var;
              p.running_mean[c] = static_cast<T>((1 - options.bn_momentum) * p.running_mean[c] + options.bn_momentum * mu);
              p.running_var[c] = static_cast<T>((1 - options.bn_momentum) * p.running_var[c] + options.bn_momentum * unbiased);
            }
          } else {
            mu = p.running_mean[c];
            var = p.running_var[c];
          }
          double is = 1.0 / std::sqrt(var + options.bn_eps);
          mean[c] = mu;
          invstd[c] = is;
          const T scale = static_cast<T>(p.gamma[c] * is);
          const T shift = static_cast<T>(p.beta[c] - p.gamma[c] * is * mu);
          for (int64_t b = 0; b < shape.batch; ++b) {
            const T* xp = x.channel(b, c);
            T* op = out.channel(b, c);
            for (int64_t i = 0; i < plane; ++i) op[i] = xp[i] * scale + shift;
          }
        }
        break;
      }
      case OpKind::Sum:
      case OpKind::ElementwiseProduct: {
        out = in(0);
        for (size_t s = 1; s < n.inputs.size(); ++s) {
          const auto& x = in(s);
          if (n.kind == OpKind::Sum)
            for (size_t i = 0; i < x.size(); ++i) out.data[i] += x.data[i];
          else
            for (size_t i = 0; i < x.size(); ++i) out.data[i] *= x.data[i];
        }
        break;
      }
      case OpKind::Concatenation: {
        int64_t offset = 0;
        const int64_t plane = out.plane();
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          const auto& x = in(s);
          for (int64_t b = 0; b < shape.batch; ++b)
            std::copy(x.channel(b, 0), x.channel(b, 0) + x.shape.channels * plane, out.channel(b, offset));
          offset += x.shape.channels;
        }
        break;
      }
      case OpKind::MaxPool:
      case OpKind::Upsample: {
        const auto& x = in(0);
        if (x.shape.spatial.size() != 2)
          throw Error(ErrorCode::UnsupportedOperator, "node '" + n.id + "': resampling supports 2-d inputs only");
        const int64_t k = n.resample().factor;
        const int64_t iw = x.shape.spatial[1];
        const int64_t oh = shape.spatial[0], ow = shape.spatial[1];
        auto& arg = tape.pool_argmax[idx];
        if (n.kind == OpKind::MaxPool) arg.resize(out.size());
        for (int64_t b = 0; b < shape.batch; ++b)
          for (int64_t c = 0; c < shape.channels; ++c) {
            const T* xp = x.channel(b, c);
            T* op = out.channel(b, c);
            for (int64_t r = 0; r < oh; ++r)
              for (int64_t q = 0; q < ow; ++q) {
                if (n.kind == OpKind::Upsample) {
                  op[r * ow + q] = xp[(r / k) * iw + q / k];
                  continue;
                }
                int64_t best = r * k * iw + q * k;
                for (int64_t dr = 0; dr < k; ++dr)
                  for (int64_t dq = 0; dq < k; ++dq) {
                    int64_t at = (r * k + dr) * iw + q * k + dq;
                    if (xp[at] > xp[best]) best = at;
                  }
                op[r * ow + q] = xp[best];
                arg[static_cast<size_t>((b * shape.channels + c) * oh * ow + r * ow + q)] = best;
              }
          }
        break;
      }
      case OpKind::Unknown:
        throw Error(ErrorCode::UnsupportedOperator, "node '" + n.id + "' has unknown kind and cannot be evaluated");
    }

    // Gate the activation when this node is a gate site of a gated group.
    auto site = coloring.site_group.find(n.id);
    if (site != coloring.site_group.end() && options.gate_mode != GateMode::None) {
      int g = site->second;
      auto sv = gates.values.find(g);
      std::vector<T> gate;
      if (options.gate_mode == GateMode::Relaxed && sv != gates.values.end()) {
        for (double s : sv->second) gate.push_back(static_cast<T>(sigma(s, gates.steepness)));
      } else if (options.gate_mode == GateMode::Masked && options.masks && options.masks->masks.count(g)) {
        const auto& m = options.masks->masks.at(g);
        for (size_t c = 0; c < m.size(); ++c) {
          double scale = sv != gates.values.end() ? sigma(sv->second[c], gates.steepness) : 1.0;
          gate.push_back(m[c] ? static_cast<T>(scale) : T(0));
        }
      }
      if (!gate.empty()) {
        tape.pre_gate[idx] = out;
        out = gate_apply(out, std::span<const T>(gate));
        tape.gate[idx] = std::move(gate);
        tape.gate_group[idx] = g;
      }
    }
    // A masked channel is absent everywhere its group reaches, not only at the
    // gate site: a later BatchNorm shift would otherwise revive it. Masked
    // mode is evaluation-only, so the tape does not record this.
    if (options.gate_mode == GateMode::Masked && options.masks) {
      auto a = coloring.assignment.find(n.id);
      if (a != coloring.assignment.end())
        for (const auto& seg : a->second) {
          auto m = options.masks->masks.find(seg.group);
          if (m == options.masks->masks.end()) continue;
          for (size_t c = 0; c < m->second.size(); ++c) {
            if (m->second[c]) continue;
            for (int64_t b = 0; b < out.shape.batch; ++b)
              std::fill_n(out.channel(b, seg.offset + static_cast<int64_t>(c)), out.plane(), T(0));
          }
        }
    }
    tape.outputs[idx] = std::move(out);
  }
  if (!tape.output().all_finite()) throw Error(ErrorCode::NonFiniteValue, "network output contains NaN or Inf");
  return tape;
}

template <typename T>
Gradients<T> backward(const Tape<T>& tape, const Weights<T>& weights, const Tensor<T>& output_grad) {
  if (tape.weights_version != weights.version)
    throw Error(ErrorCode::StaleTape, "weights changed after the forward pass");
  const Graph& graph = *tape.graph;
  const size_t count = graph.size();
  const size_t exit = graph.index_of(graph.exit_id());
  if (!(output_grad.shape == tape.outputs[exit].shape))
    throw Error(ErrorCode::ShapeMismatch, "output gradient shape " + output_grad.shape.str());

  Gradients<T> grads;
  for (const auto& [id, p] : weights.nodes) {
    NodeParams<T> z;
    z.weight.assign(p.weight.size(), T(0));
    z.bias.assign(p.bias.size(), T(0));
    z.gamma.assign(p.gamma.size(), T(0));
    z.beta.assign(p.beta.size(), T(0));
    grads.weights[id] = std::move(z);
  }
  for (const auto& [g, s] : tape.gate_parameters) grads.gates[g].assign(s.size(), 0.0);

  std::vector<Tensor<T>> dout(count);
  std::vector<bool> has(count, false);
  dout[exit] = output_grad;
  has[exit] = true;
  auto accumulate = [&](const NodeId& id, const Tensor<T>& g) {
    size_t i = graph.index_of(id);
    if (!has[i]) {
      dout[i] = g;
      has[i] = true;
    } else {
      for (size_t k = 0; k < g.size(); ++k) dout[i].data[k] += g.data[k];
    }
  };

  const auto& order = graph.topo_order();
  for (auto rit = order.rbegin(); rit != order.rend(); ++rit) {
    const size_t idx = *rit;
    if (!has[idx] || tape.silenced[idx]) continue;
    const auto& n = graph.nodes()[idx];
    Tensor<T> dy = std::move(dout[idx]);

    if (tape.gate_group[idx] >= 0) {
      const auto& gate = tape.gate[idx];
      const auto& pre = tape.pre_gate[idx];
      const int64_t plane = dy.plane();
      bool want_s = tape.gate_mode == GateMode::Relaxed && grads.gates.count(tape.gate_group[idx]);
      for (int64_t c = 0; c < dy.shape.channels; ++c) {
        double acc = 0;
        for (int64_t b = 0; b < dy.shape.batch; ++b) {
          T* d = dy.channel(b, c);
          const T* x = pre.channel(b, c);
          for (int64_t i = 0; i < plane; ++i) {
            acc += static_cast<double>(d[i]) * x[i];
            d[i] *= gate[c];
          }
        }
        if (want_s) {
          int g = tape.gate_group[idx];
          grads.gates[g][c] += acc * sigma_derivative(tape.gate_parameters.at(g)[c], tape.steepness);
        }
      }
    }

    auto in = [&](size_t slot) -> const Tensor<T>& { return tape.outputs[graph.index_of(n.inputs[slot])]; };
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Unknown:
        break;
      case OpKind::Output:
        accumulate(n.inputs[0], dy);
        break;
      case OpKind::ReLU: {
        const auto& x = in(0);
        for (size_t i = 0; i < dy.size(); ++i)
          if (!(x.data[i] > T(0))) dy.data[i] = T(0);
        accumulate(n.inputs[0], dy);
        break;
      }
      case OpKind::Convolution: {
        const auto& p = weights.at(n.id);
        auto& gp = grads.weights[n.id];
        const auto& x = in(0);
        auto g = geometry(n.conv(), x.shape, dy.shape);
        kernels::conv2d_backward_weight(g, x.data.data(), dy.data.data(), gp.weight.data(),
                                        gp.bias.empty() ? nullptr : gp.bias.data());
        Tensor<T> dx(x.shape);
        kernels::conv2d_backward_input(g, dy.data.data(), p.weight.data(), dx.data.data());
        accumulate(n.inputs[0], dx);
        break;
      }
      case OpKind::FullyConnected: {
        const auto& p = weights.at(n.id);
        auto& gp = grads.weights[n.id];
        const auto& x = in(0);
        const auto& a = n.fc();
        Tensor<T> dx(x.shape);
        kernels::linear_backward(dy.shape.batch, a.in_channels, a.out_channels, x.data.data(), p.weight.data(),
                                 dy.data.data(), dx.data.data(), gp.weight.data(), gp.bias.data());
        accumulate(n.inputs[0], dx);
        break;
      }
      case OpKind::BatchNorm: {
        const auto& p = weights.at(n.id);
        auto& gp = grads.weights[n.id];
        const auto& x = in(0);
        Tensor<T> dx(x.shape);
        const int64_t plane = x.plane();
        const double m = static_cast<double>(x.shape.batch * plane);
        for (int64_t c = 0; c < x.shape.channels; ++c) {
          const double mu = tape.bn_mean[idx][c];
          const double is = tape.bn_invstd[idx][c];
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t b = 0; b < x.shape.batch; ++b) {
            const T* d = dy.channel(b, c);
            const T* xp = x.channel(b, c);
            for (int64_t i = 0; i < plane; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (xp[i] - mu) * is;
            }
          }
          gp.gamma[c] += static_cast<T>(sum_dy_xhat);
          gp.beta[c] += static_cast<T>(sum_dy);
          const double gamma = p.gamma[c];
          for (int64_t b = 0; b < x.shape.batch; ++b) {
            const T* d = dy.channel(b, c);
            const T* xp = x.channel(b, c);
            T* o = dx.channel(b, c);
            for (int64_t i = 0; i < plane; ++i) {
              if (tape.training) {
                double xhat = (xp[i] - mu) * is;
                o[i] = static_cast<T>(gamma * is / m * (m * d[i] - sum_dy - xhat * sum_dy_xhat));
              } else {
                o[i] = static_cast<T>(d[i] * gamma * is);
              }
            }
          }
        }
        accumulate(n.inputs[0], dx);
        break;
      }
      case OpKind::Sum:
        for (const auto& p : n.inputs) accumulate(p, dy);
        break;
      case OpKind::ElementwiseProduct: {
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          Tensor<T> dx = dy;
          for (size_t o = 0; o < n.inputs.size(); ++o) {
            if (o == s) continue;
            const auto& x = in(o);
            for (size_t i = 0; i < dx.size(); ++i) dx.data[i] *= x.data[i];
          }
          accumulate(n.inputs[s], dx);
        }
        break;
      }
      case OpKind::Concatenation: {
        int64_t offset = 0;
        const int64_t plane = dy.plane();
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          Tensor<T> dx(in(s).shape);
          for (int64_t b = 0; b < dy.shape.batch; ++b)
            std::copy(dy.channel(b, offset), dy.channel(b, offset) + dx.shape.channels * plane, dx.channel(b, 0));
          offset += dx.shape.channels;
          accumulate(n.inputs[s], dx);
        }
        break;
      }
      case OpKind::MaxPool:
      case OpKind::Upsample: {
        const auto& x = in(0);
        Tensor<T> dx(x.shape);
        const int64_t k = n.resample().factor;
        const int64_t iw = x.shape.spatial[1];
        const int64_t oh = dy.shape.spatial[0], ow = dy.shape.spatial[1];
        for (int64_t b = 0; b < dy.shape.batch; ++b)
          for (int64_t c = 0; c < dy.shape.channels; ++c) {
            const T* d = dy.channel(b, c);
            T* o = dx.channel(b, c);
            for (int64_t r = 0; r < oh; ++r)
              for (int64_t q = 0; q < ow; ++q) {
                if (n.kind == OpKind::MaxPool)
                  o[tape.pool_argmax[idx][static_cast<size_t>((b * dy.shape.channels + c) * oh * ow + r * ow + q)]] +=
                      d[r * ow + q];
                else
                  o[(r / k) * iw + q / k] += d[r * ow + q];
              }
          }
        accumulate(n.inputs[0], dx);
        break;
      }
    }
  }
  return grads;
}

template <typename T>
Tensor<T> evaluate(const Graph& graph, const Coloring& coloring, const GateSet& gates, const Weights<T>& weights,
                   const Tensor<T>& input, GateMode mode, const MaskSet* masks, const std::set<NodeId>* silenced) {
  ForwardOptions options;
  options.training = false;
  options.update_running_stats = false;
  options.gate_mode = mode;
  options.masks = masks;
  options.silenced = silenced;
  // Inference never writes to the weights.
  auto tape = forward(graph, coloring, gates, const_cast<Weights<T>&>(weights), input, options);
  return tape.output();
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<double> Weights<double>::cast<double>() const;
template Weights<float> init_weights<float>(const Graph&, uint64_t);
template Weights<double> init_weights<double>(const Graph&, uint64_t);
template Tape<float> forward<float>(const Graph&, const Coloring&, const GateSet&, Weights<float>&,
                                    const Tensor<float>&, const ForwardOptions&);
template Tape<double> forward<double>(const Graph&, const Coloring&, const GateSet&, Weights<double>&,
                                      const Tensor<double>&, const ForwardOptions&);
template Gradients<float> backward<float>(const Tape<float>&, const Weights<float>&, const Tensor<float>&);
template Gradients<double> backward<double>(const Tape<double>&, const Weights<double>&, const Tensor<double>&);
template Tensor<float> evaluate<float>(const Graph&, const Coloring&, const GateSet&, const Weights<float>&,
                                       const Tensor<float>&, GateMode, const MaskSet*, const std::set<NodeId>*);
template Tensor<double> evaluate<double>(const Graph&, const Coloring&, const GateSet&, const Weights<double>&,
                                         const Tensor<double>&, GateMode, const MaskSet*, const std::set<NodeId>*);

}  // namespace chprune
