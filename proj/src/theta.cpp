#include "ugnn/theta.hpp"

#include <cmath>
#include <istream>
#include <ostream>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"

namespace ugnn {

namespace {

double guarded_denominator(double x, double s) {
  const double d = s + std::abs(x);
  if (std::abs(d) < kDenominatorFloor) return d < 0.0 ? -kDenominatorFloor : kDenominatorFloor;
  return d;
}

}  // namespace

double softsign(double x, double s) { return s * x / guarded_denominator(x, s); }

SoftsignGrad grad_softsign(double x, double s) {
  const double d = guarded_denominator(x, s);
  const double d2 = d * d;
  return {s * s / d2, x * std::abs(x) / d2};
}

std::vector<double> ThetaParams::pack() const {
  std::vector<double> flat;
  flat.reserve(size());
  flat.insert(flat.end(), edge_scale.begin(), edge_scale.end());
  flat.insert(flat.end(), edge_shift.begin(), edge_shift.end());
  flat.insert(flat.end(), bias_scale.begin(), bias_scale.end());
  flat.insert(flat.end(), bias_shift.begin(), bias_shift.end());
  flat.push_back(edge_act_scale);
  flat.push_back(bias_act_scale);
  return flat;
}

void ThetaParams::unpack(const std::vector<double>& flat) {
  if (flat.size() != size()) throw ConfigError("theta: packed length mismatch");
  auto it = flat.begin();
  const auto take = [&](std::vector<double>& dst) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  take(edge_scale);
  take(edge_shift);
  take(bias_scale);
  take(bias_shift);
  edge_act_scale = *it++;
  bias_act_scale = *it;
}

bool ThetaParams::all_finite() const {
  for (double v : pack()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

ThetaParams init_identityish(std::size_t k_edge, std::size_t k_bias) {
  ThetaParams t;
  t.edge_scale.assign(k_edge, 1.0);
  t.edge_shift.assign(k_edge, 0.0);
  t.bias_scale.assign(k_bias, 1.0);
  t.bias_shift.assign(k_bias, 0.0);
  t.edge_act_scale = 1.0;
  t.bias_act_scale = 1.0;
  return t;
}

void check_compatible(const UnifiedGraph& u, const ThetaParams& theta) {
  if (!u.grouped()) throw ConfigError("theta: unified graph has no group assignment");
  if (theta.edge_scale.size() != u.k_edge || theta.edge_shift.size() != u.k_edge ||
      theta.bias_scale.size() != u.k_bias || theta.bias_shift.size() != u.k_bias) {
    throw ConfigError("theta: tensor lengths do not match k_edge = " + std::to_string(u.k_edge) +
                      ", k_bias = " + std::to_string(u.k_bias));
  }
}

std::vector<double> transform_edges(const UnifiedGraph& u, const ThetaParams& theta) {
  check_compatible(u, theta);
  std::vector<double> out(u.total_edges());
  for (std::size_t e = 0; e < out.size(); ++e) {
    const auto g = u.edge_group[e];
    out[e] = softsign(u.edges[e].weight * theta.edge_scale[g] + theta.edge_shift[g], theta.edge_act_scale);
  }
  return out;
}

std::vector<double> transform_biases(const UnifiedGraph& u, const ThetaParams& theta) {
  check_compatible(u, theta);
  std::vector<double> out(u.total_nodes());
  for (std::size_t v = 0; v < out.size(); ++v) {
    const auto h = u.bias_group[v];
    out[v] = softsign(u.nodes[v].bias * theta.bias_scale[h] + theta.bias_shift[h], theta.bias_act_scale);
  }
  return out;
}

void project_act_scales(ThetaParams& theta) {
  for (double* s : {&theta.edge_act_scale, &theta.bias_act_scale}) {
    if (std::abs(*s) < kActScaleFloor) *s = *s < 0.0 ? -kActScaleFloor : kActScaleFloor;
  }
}

namespace {

constexpr std::uint32_t kThetaMagic = 0x48544755;  // "UGTH" little-endian

}  // namespace

void write_theta(std::ostream& out, const ThetaParams& theta) {
  io::write_le<std::uint32_t>(out, kThetaMagic);
  io::write_le<std::uint64_t>(out, theta.edge_scale.size());
  io::write_le<std::uint64_t>(out, theta.bias_scale.size());
  for (double v : theta.pack()) io::write_le<double>(out, v);
}

ThetaParams read_theta(std::istream& in) {
  if (io::read_le<std::uint32_t>(in, "theta checkpoint") != kThetaMagic) throw DataError("theta checkpoint: bad magic at byte offset 0");
  const auto k_edge = io::read_le<std::uint64_t>(in, "theta checkpoint");
  const auto k_bias = io::read_le<std::uint64_t>(in, "theta checkpoint");
  ThetaParams t = init_identityish(k_edge, k_bias);
  std::vector<double> flat(t.size());
  for (auto& v : flat) v = io::read_le<double>(in, "theta checkpoint");
  t.unpack(flat);
  if (!t.all_finite()) throw DataError("theta checkpoint: non-finite value");
  return t;
}

}  // namespace ugnn
