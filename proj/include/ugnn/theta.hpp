#pragma once

// Shared learnable parameters and the scaled-SoftSign feature transforms.

#include <iosfwd>
#include <vector>

#include "ugnn/unified.hpp"

namespace ugnn {

inline constexpr double kDenominatorFloor = 1e-8;
inline constexpr double kActScaleFloor = 1e-4;

struct ThetaParams {
  std::vector<double> edge_scale;  // per edge group
  std::vector<double> edge_shift;
  std::vector<double> bias_scale;  // per bias group
  std::vector<double> bias_shift;
  double edge_act_scale = 1.0;
  double bias_act_scale = 1.0;

  std::size_t size() const { return 2 * edge_scale.size() + 2 * bias_scale.size() + 2; }
  // Packing order: edge_scale, edge_shift, bias_scale, bias_shift, edge_act_scale, bias_act_scale.
  std::vector<double> pack() const;
  void unpack(const std::vector<double>& flat);
  bool all_finite() const;
};

// Same layout as ThetaParams.
using ThetaGrads = ThetaParams;

// s*x / (s + |x|), with the denominator kept at least kDenominatorFloor in magnitude.
double softsign(double x, double s);

struct SoftsignGrad {
  double dx = 0.0;
  double ds = 0.0;
};
SoftsignGrad grad_softsign(double x, double s);

// Scales = 1, shifts = 0, activation scales = 1.
ThetaParams init_identityish(std::size_t k_edge, std::size_t k_bias);

// Updated features; the graph's stored features are left untouched.
std::vector<double> transform_edges(const UnifiedGraph& u, const ThetaParams& theta);
std::vector<double> transform_biases(const UnifiedGraph& u, const ThetaParams& theta);

// Checks lengths against the graph's group counts.
void check_compatible(const UnifiedGraph& u, const ThetaParams& theta);

// Pushes |act scale| back up to kActScaleFloor (sign kept, 0 maps to +floor).
void project_act_scales(ThetaParams& theta);

// Binary checkpoint: magic, u64 lengths, then the six tensors as LE f64.
void write_theta(std::ostream& out, const ThetaParams& theta);
ThetaParams read_theta(std::istream& in);

}  // namespace ugnn
