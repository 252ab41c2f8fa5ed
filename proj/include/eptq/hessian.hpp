#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "eptq/graph.hpp"
#include "eptq/tape.hpp"

namespace eptq {

enum class LossKind { MSE, CESoftmax, BCESigmoid, GaussianNLL, PoissonNLL };

const char* loss_kind_name(LossKind kind);
LossKind loss_kind_from_name(const std::string& name);

// Output-loss model: the Hessian of the task loss w.r.t. the network output
// depends only on the output itself for these losses, so no labels enter any
// Hessian computation.
struct LossHessianModel {
  LossKind kind = LossKind::CESoftmax;
  double sigma2 = 1.0;  // GaussianNLL only
};

// Closed-form Hessian A(r) of the loss w.r.t. the output vector r.
Matrix loss_hessian(const LossHessianModel& model, const Tensor& r);

// Scalar loss L(y, r). Independent of loss_hessian; also the base function
// the finite-difference Hessian oracles differentiate.
double loss_value(const LossHessianModel& model, const Tensor& y, const Tensor& r);

// Smallest c with A(r) <= c*I for all r. Throws for PoissonNLL (unbounded).
double loss_bound(const LossHessianModel& model, std::size_t output_dim);

enum class ProbeKind { Gaussian, Rademacher, Zero };  // Zero is a test hook

// Estimated Hessian information: per-layer diagonal bounds over weight
// elements and per-(sample, layer) attention scalars.
struct HessianScores {
  std::map<int, std::vector<double>> weight_diag;
  std::map<std::pair<int, int>, double> sla;  // (sample index, comparison layer)
  int probes = 0;
  std::uint64_t seed = 0;

  double sla_at(int sample, int layer) const;
};

// Hutchinson estimate of Diag(E_x[J^T J]) for the Jacobian of the output
// w.r.t. one layer's weights, averaged over the dataset:
//   h = (1 / (M * |D|)) * sum_x sum_m (v_m^T J) o (v_m^T J),  v_m ~ N(0, I).
// Deterministic: per-sample probe streams derive from seed and sample index,
// reduction runs in sample-then-probe order.
std::vector<double> lfh_weight_diag(const NetworkGraph& graph, const Dataset& data, int layer,
                                    int probes, std::uint64_t seed,
                                    ProbeKind probe_kind = ProbeKind::Gaussian);

// Per-sample per-comparison-point attention score
//   u_max = max_i (1/M) sum_m (v_m^T J^(z))_i^2.
// One vjp per probe yields the gradient at every comparison point, so probes
// are shared across layers of the same sample.
std::map<std::pair<int, int>, double> sla_scores(const NetworkGraph& graph, const Dataset& data,
                                                 int probes, std::uint64_t seed,
                                                 ProbeKind probe_kind = ProbeKind::Gaussian);

// Test oracle for the label-free Hessian: J^T A(f(x)) J with J from central
// finite differences. Target must stay within the finite-difference limit.
Matrix exact_gn_hessian(const NetworkGraph& graph, const Tensor& input, TargetRef target,
                        const LossHessianModel& loss);

// (ln(v) - ln(min)) / (ln(max) - ln(min)); requires positive, non-constant
// input. Scale-invariant, order-preserving, range [0, 1].
std::vector<double> log_normalize(const std::vector<double>& scores);

// Spearman rank correlation with average ranks on ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace eptq
