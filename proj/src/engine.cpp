#include "ugnn/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

#include "ugnn/errors.hpp"

namespace ugnn {

std::uint64_t fingerprint(const ThetaParams& theta) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&](double v) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto* vec : {&theta.edge_scale, &theta.edge_shift, &theta.bias_scale, &theta.bias_shift}) {
    mix(static_cast<double>(vec->size()));
    for (double v : *vec) mix(v);
  }
  mix(theta.edge_act_scale);
  mix(theta.bias_act_scale);
  return h;
}

Matrix ActivationState::logits(std::size_t model) const {
  const ModelBlock& b = engine_->graph().blocks.at(model);
  const std::size_t B = batch_[model];
  Matrix out(B, b.output_size());
  const std::size_t first = b.layers.back().begin;
  for (std::size_t c = 0; c < out.cols; ++c) {
    const double* row = act_.data() + slab_[model] + (first + c) * B;
    for (std::size_t s = 0; s < B; ++s) out(s, c) = row[s];
  }
  return out;
}

std::span<const double> ActivationState::node_row(std::size_t node) const {
  const std::size_t m = engine_->graph().model_of_node(node);
  const std::size_t local = node - engine_->graph().blocks[m].node_offset;
  return {act_.data() + slab_[m] + local * batch_[m], batch_[m]};
}

void validate_alpha(std::span<const double> alpha, std::size_t models) {
  if (alpha.size() != models) {
    throw ConfigError("loss weights: expected " + std::to_string(models) + " entries, got " + std::to_string(alpha.size()));
  }
  double sum = 0.0;
  for (double a : alpha) {
    if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("loss weights must be finite and non-negative");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("loss weights must sum to 1 (got " + std::to_string(sum) + ")");
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

LossReport cross_entropy(std::span<const std::string> model_ids, std::span<const Matrix> logits,
                         std::span<const std::vector<int>> labels, std::span<const double> alpha,
                         std::vector<Matrix>* logit_grads) {
  const std::size_t m = logits.size();
  if (labels.size() != m || model_ids.size() != m) throw ConfigError("cross_entropy: per-model inputs differ in length");
  validate_alpha(alpha, m);
  LossReport report;
  report.alpha.assign(alpha.begin(), alpha.end());
  if (logit_grads) logit_grads->assign(m, Matrix{});
  std::vector<double> prob;
  for (std::size_t i = 0; i < m; ++i) {
    ModelLoss ml;
    ml.model_id = model_ids[i];
    const Matrix& z = logits[i];
    if (z.rows == 0) {
      report.per_model.push_back(ml);
      continue;
    }
    if (z.cols < 2) throw ConfigError("cross_entropy: model '" + ml.model_id + "' has fewer than 2 classes");
    if (labels[i].size() != z.rows) {
      throw DataError("cross_entropy: model '" + ml.model_id + "' has " + std::to_string(labels[i].size()) +
                      " labels for " + std::to_string(z.rows) + " samples");
    }
    Matrix* grad = nullptr;
    if (logit_grads) {
      (*logit_grads)[i] = Matrix(z.rows, z.cols);
      grad = &(*logit_grads)[i];
    }
    const double inv_batch = 1.0 / static_cast<double>(z.rows);
    prob.resize(z.cols);
    double sum_loss = 0.0;
    for (std::size_t s = 0; s < z.rows; ++s) {
      const int y = labels[i][s];
      if (y < 0 || static_cast<std::size_t>(y) >= z.cols) {
        throw DataError("cross_entropy: model '" + ml.model_id + "' sample " + std::to_string(s) + " has label " +
                        std::to_string(y) + " outside [0, " + std::to_string(z.cols) + ")");
      }
      const auto row = z.row(s);
      const double mx = *std::max_element(row.begin(), row.end());
      double denom = 0.0;
      for (std::size_t c = 0; c < z.cols; ++c) {
        prob[c] = std::exp(row[c] - mx);
        denom += prob[c];
      }
      for (auto& p : prob) p /= denom;
      sum_loss += -(row[static_cast<std::size_t>(y)] - mx - std::log(denom));
      if (argmax(row) == static_cast<std::size_t>(y)) ++ml.correct;
      if (grad) {
        for (std::size_t c = 0; c < z.cols; ++c) {
          const double target = c == static_cast<std::size_t>(y) ? 1.0 : 0.0;
          (*grad)(s, c) = alpha[i] * (prob[c] - target) * inv_batch;
        }
      }
    }
    ml.loss = sum_loss * inv_batch;
    ml.count = z.rows;
    report.total += alpha[i] * ml.loss;
    report.per_model.push_back(ml);
  }
  return report;
}

Engine::Engine(const UnifiedGraph& u, unsigned threads) : u_(u), threads_(std::max(1u, threads)) {
  const std::size_t n = u.total_nodes();
  in_ptr_.assign(n + 1, 0);
  for (const auto& e : u.edges) ++in_ptr_[e.dst + 1];
  for (std::size_t v = 0; v < n; ++v) in_ptr_[v + 1] += in_ptr_[v];
  in_edge_.resize(u.total_edges());
  std::vector<std::size_t> fill(in_ptr_.begin(), in_ptr_.end() - 1);
  // Edge indices ascend within each destination list.
  for (std::size_t e = 0; e < u.total_edges(); ++e) in_edge_[fill[u.edges[e].dst]++] = e;
  for (const auto& b : u.blocks) max_depth_ = std::max(max_depth_, b.layers.size() - 1);
}

template <typename Fn>
void Engine::for_each_model(const std::vector<std::size_t>& batch, Fn&& fn) const {
  const std::size_t m = u_.model_count();
  if (threads_ <= 1 || m <= 1) {
    for (std::size_t i = 0; i < m; ++i) {
      if (batch[i] > 0) fn(i);
    }
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t workers = std::min<std::size_t>(threads_, m);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < m; i += workers) {
        if (batch[i] > 0) fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

ActivationState Engine::run(EmulationMode mode, const ThetaParams* theta, std::span<const ModelInput> inputs) const {
  if (inputs.size() != u_.model_count()) {
    throw ConfigError("forward: expected inputs for " + std::to_string(u_.model_count()) + " models, got " +
                      std::to_string(inputs.size()));
  }
  ActivationState st;
  st.engine_ = this;
  st.mode_ = mode;
  st.batch_.resize(inputs.size());
  st.slab_.resize(inputs.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ModelBlock& b = u_.blocks[i];
    const std::size_t B = inputs[i].batch;
    if (B > 0 && inputs[i].values.size() != B * b.input_size()) {
      throw ConfigError("forward: model '" + b.model_id + "' expects " + std::to_string(b.input_size()) +
                        " input values per sample, got " + std::to_string(inputs[i].values.size()) + " for batch " +
                        std::to_string(B));
    }
    st.batch_[i] = B;
    st.slab_[i] = total;
    total += b.node_count * B;
  }
  st.act_.assign(total, 0.0);

  if (mode == EmulationMode::transformed) {
    check_compatible(u_, *theta);
    st.theta_fingerprint_ = fingerprint(*theta);
    st.edge_pre_.resize(u_.total_edges());
    st.edge_upd_.resize(u_.total_edges());
    for (std::size_t e = 0; e < u_.total_edges(); ++e) {
      const auto g = u_.edge_group[e];
      st.edge_pre_[e] = u_.edges[e].weight * theta->edge_scale[g] + theta->edge_shift[g];
      st.edge_upd_[e] = softsign(st.edge_pre_[e], theta->edge_act_scale);
    }
    st.bias_pre_.resize(u_.total_nodes());
    st.bias_upd_.resize(u_.total_nodes());
    for (std::size_t v = 0; v < u_.total_nodes(); ++v) {
      const auto h = u_.bias_group[v];
      st.bias_pre_[v] = u_.nodes[v].bias * theta->bias_scale[h] + theta->bias_shift[h];
      st.bias_upd_[v] = softsign(st.bias_pre_[v], theta->bias_act_scale);
    }
  } else {
    st.edge_upd_.resize(u_.total_edges());
    for (std::size_t e = 0; e < u_.total_edges(); ++e) st.edge_upd_[e] = u_.edges[e].weight;
    st.bias_upd_.resize(u_.total_nodes());
    for (std::size_t v = 0; v < u_.total_nodes(); ++v) st.bias_upd_[v] = u_.nodes[v].bias;
  }

  for_each_model(st.batch_, [&](std::size_t i) {
    const ModelBlock& b = u_.blocks[i];
    const std::size_t B = st.batch_[i];
    double* slab = st.act_.data() + st.slab_[i];
    // H(0) = X
    const auto x = inputs[i].values;
    const std::size_t in = b.input_size();
    for (std::size_t j = 0; j < in; ++j) {
      double* row = slab + (b.layers[0].begin + j) * B;
      for (std::size_t s = 0; s < B; ++s) row[s] = x[s * in + j];
    }
    for (std::size_t layer = 1; layer < b.layers.size(); ++layer) {
      for (std::size_t local = b.layers[layer].begin; local < b.layers[layer].end; ++local) {
        const std::size_t v = b.node_offset + local;
        double* z = slab + local * B;
        std::fill(z, z + B, 0.0);
        for (std::size_t k = in_ptr_[v]; k < in_ptr_[v + 1]; ++k) {
          const std::size_t e = in_edge_[k];
          const double w = u_.edges[e].coeff * st.edge_upd_[e];
          const double* h = slab + (u_.edges[e].src - b.node_offset) * B;
          for (std::size_t s = 0; s < B; ++s) z[s] += w * h[s];
        }
        const double bias = st.bias_upd_[v];
        const Activation act = u_.nodes[v].activation;
        for (std::size_t s = 0; s < B; ++s) z[s] = activate(act, z[s] + bias);
      }
    }
  });
  return st;
}

ActivationState Engine::forward(const ThetaParams& theta, std::span<const ModelInput> inputs) const {
  return run(EmulationMode::transformed, &theta, inputs);
}

ActivationState Engine::forward_raw(std::span<const ModelInput> inputs) const {
  return run(EmulationMode::raw, nullptr, inputs);
}

ThetaGrads Engine::backward(const ThetaParams& theta, const ActivationState& st, std::span<const Matrix> logit_grads) const {
  if (st.mode_ == EmulationMode::raw) {
    throw UsageError("backward: raw emulation bypasses the theta transforms, so there is nothing to differentiate");
  }
  if (st.engine_ != this) throw UsageError("backward: activation state was produced by a different engine");
  if (st.theta_fingerprint_ != fingerprint(theta)) {
    throw UsageError("backward: theta changed since the forward pass that produced this state");
  }
  if (logit_grads.size() != u_.model_count()) throw UsageError("backward: one logit gradient per model is required");
  for (std::size_t i = 0; i < u_.model_count(); ++i) {
    const Matrix& g = logit_grads[i];
    if (st.batch_[i] == 0) continue;
    if (g.rows != st.batch_[i] || g.cols != u_.blocks[i].output_size()) {
      throw UsageError("backward: logit gradient for model '" + u_.blocks[i].model_id + "' has the wrong shape");
    }
  }

  std::vector<double> d_edge(u_.total_edges(), 0.0);
  std::vector<double> d_bias(u_.total_nodes(), 0.0);
  for_each_model(st.batch_, [&](std::size_t i) {
    const ModelBlock& b = u_.blocks[i];
    const std::size_t B = st.batch_[i];
    const double* slab = st.act_.data() + st.slab_[i];
    std::vector<double> d_act(b.node_count * B, 0.0);
    const Matrix& seed = logit_grads[i];
    for (std::size_t c = 0; c < b.output_size(); ++c) {
      double* row = d_act.data() + (b.layers.back().begin + c) * B;
      for (std::size_t s = 0; s < B; ++s) row[s] = seed(s, c);
    }
    std::vector<double> dz(B);
    for (std::size_t layer = b.layers.size() - 1; layer >= 1; --layer) {
      for (std::size_t local = b.layers[layer].begin; local < b.layers[layer].end; ++local) {
        const std::size_t v = b.node_offset + local;
        const double* h = slab + local * B;
        const double* dh = d_act.data() + local * B;
        const Activation act = u_.nodes[v].activation;
        double dsum = 0.0;
        bool any = false;
        for (std::size_t s = 0; s < B; ++s) {
          dz[s] = dh[s] * activation_slope(act, h[s]);
          dsum += dz[s];
          any = any || dz[s] != 0.0;
        }
        d_bias[v] = dsum;
        if (!any) continue;
        const bool feeds_hidden = layer > 1;
        for (std::size_t k = in_ptr_[v]; k < in_ptr_[v + 1]; ++k) {
          const std::size_t e = in_edge_[k];
          const std::size_t src = u_.edges[e].src - b.node_offset;
          const double coeff = u_.edges[e].coeff;
          const double* hs = slab + src * B;
          double acc = 0.0;
          for (std::size_t s = 0; s < B; ++s) acc += dz[s] * hs[s];
          d_edge[e] = coeff * acc;
          if (feeds_hidden) {
            const double w = coeff * st.edge_upd_[e];
            double* dhs = d_act.data() + src * B;
            for (std::size_t s = 0; s < B; ++s) dhs[s] += w * dz[s];
          }
        }
      }
    }
  });

  // Chain through the transforms in fixed element order.
  ThetaGrads g = init_identityish(u_.k_edge, u_.k_bias);
  std::fill(g.edge_scale.begin(), g.edge_scale.end(), 0.0);
  std::fill(g.bias_scale.begin(), g.bias_scale.end(), 0.0);
  g.edge_act_scale = 0.0;
  g.bias_act_scale = 0.0;
  for (std::size_t e = 0; e < u_.total_edges(); ++e) {
    if (d_edge[e] == 0.0) continue;
    const auto grp = u_.edge_group[e];
    const SoftsignGrad sg = grad_softsign(st.edge_pre_[e], theta.edge_act_scale);
    const double dx = d_edge[e] * sg.dx;
    g.edge_scale[grp] += dx * u_.edges[e].weight;
    g.edge_shift[grp] += dx;
    g.edge_act_scale += d_edge[e] * sg.ds;
  }
  for (std::size_t v = 0; v < u_.total_nodes(); ++v) {
    if (d_bias[v] == 0.0) continue;
    const auto grp = u_.bias_group[v];
    const SoftsignGrad sg = grad_softsign(st.bias_pre_[v], theta.bias_act_scale);
    const double dx = d_bias[v] * sg.dx;
    g.bias_scale[grp] += dx * u_.nodes[v].bias;
    g.bias_shift[grp] += dx;
    g.bias_act_scale += d_bias[v] * sg.ds;
  }
  return g;
}

}  // namespace ugnn
