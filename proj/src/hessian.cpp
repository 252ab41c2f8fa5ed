#include "eptq/hessian.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "eptq/rng.hpp"

namespace eptq {

const char* loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::MSE: return "mse";
    case LossKind::CESoftmax: return "ce_softmax";
    case LossKind::BCESigmoid: return "bce_sigmoid";
    case LossKind::GaussianNLL: return "gaussian_nll";
    case LossKind::PoissonNLL: return "poisson_nll";
  }
  return "?";
}

LossKind loss_kind_from_name(const std::string& name) {
  if (name == "mse") return LossKind::MSE;
  if (name == "ce_softmax") return LossKind::CESoftmax;
  if (name == "bce_sigmoid") return LossKind::BCESigmoid;
  if (name == "gaussian_nll") return LossKind::GaussianNLL;
  if (name == "poisson_nll") return LossKind::PoissonNLL;
  throw std::invalid_argument("unknown loss kind '" + name + "'");
}

Matrix loss_hessian(const LossHessianModel& model, const Tensor& r) {
  const std::size_t d = r.size();
  Matrix a(d, d);
  switch (model.kind) {
    case LossKind::MSE: {
      for (std::size_t i = 0; i < d; ++i) a.at(i, i) = 2.0 / static_cast<double>(d);
      return a;
    }
    case LossKind::CESoftmax: {
      Tensor sm(r.shape());
      double mx = r[0];
      for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, r[i]);
      double z = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        sm[i] = std::exp(r[i] - mx);
        z += sm[i];
      }
      for (std::size_t i = 0; i < d; ++i) sm[i] /= z;
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          a.at(i, j) = (i == j) ? sm[i] * (1.0 - sm[i]) : -sm[i] * sm[j];
        }
      }
      return a;
    }
    case LossKind::BCESigmoid: {
      for (std::size_t i = 0; i < d; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-r[i]));
        a.at(i, i) = s * (1.0 - s);
      }
      return a;
    }
    case LossKind::GaussianNLL: {
      if (!(model.sigma2 > 0.0)) throw std::invalid_argument("sigma^2 must be positive");
      for (std::size_t i = 0; i < d; ++i) a.at(i, i) = 2.0 / model.sigma2;
      return a;
    }
    case LossKind::PoissonNLL: {
      for (std::size_t i = 0; i < d; ++i) a.at(i, i) = std::exp(r[i]);
      return a;
    }
  }
  throw std::logic_error("unknown loss kind");
}

double loss_value(const LossHessianModel& model, const Tensor& y, const Tensor& r) {
  if (!y.same_shape(r)) throw std::invalid_argument("loss_value: label/output shape mismatch");
  const std::size_t d = r.size();
  switch (model.kind) {
    case LossKind::MSE: {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += (r[i] - y[i]) * (r[i] - y[i]);
      return acc / static_cast<double>(d);
    }
    case LossKind::CESoftmax: {
      double mx = r[0];
      for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, r[i]);
      double z = 0.0;
      for (std::size_t i = 0; i < d; ++i) z += std::exp(r[i] - mx);
      const double log_z = std::log(z) + mx;
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc -= y[i] * (r[i] - log_z);
      return acc;
    }
    case LossKind::BCESigmoid: {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        // -y log(sigmoid) - (1-y) log(1-sigmoid), in the stable logit form
        const double soft_plus = r[i] > 0.0 ? r[i] + std::log1p(std::exp(-r[i]))
                                            : std::log1p(std::exp(r[i]));
        acc += soft_plus - y[i] * r[i];
      }
      return acc;
    }
    case LossKind::GaussianNLL: {
      if (!(model.sigma2 > 0.0)) throw std::invalid_argument("sigma^2 must be positive");
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += (r[i] - y[i]) * (r[i] - y[i]);
      return acc / model.sigma2;
    }
    case LossKind::PoissonNLL: {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += std::exp(r[i]) - y[i] * r[i];
      return acc;
    }
  }
  throw std::logic_error("unknown loss kind");
}

double loss_bound(const LossHessianModel& model, std::size_t output_dim) {
  switch (model.kind) {
    case LossKind::MSE: return 2.0 / static_cast<double>(output_dim);
    case LossKind::CESoftmax: return 1.0;
    case LossKind::BCESigmoid: return 1.0;
    case LossKind::GaussianNLL:
      if (!(model.sigma2 > 0.0)) throw std::invalid_argument("sigma^2 must be positive");
      return 2.0 / model.sigma2;
    case LossKind::PoissonNLL:
      throw std::invalid_argument("poisson_nll Hessian is unbounded");
  }
  throw std::logic_error("unknown loss kind");
}

double HessianScores::sla_at(int sample, int layer) const {
  auto it = sla.find({sample, layer});
  if (it == sla.end()) {
    throw std::out_of_range("missing attention score for sample " + std::to_string(sample) +
                            ", layer " + std::to_string(layer));
  }
  return it->second;
}

namespace {

Tensor draw_probe(Rng& rng, const std::vector<std::size_t>& shape, ProbeKind kind) {
  Tensor v(shape);
  switch (kind) {
    case ProbeKind::Gaussian:
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.next_gaussian();
      break;
    case ProbeKind::Rademacher:
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = (rng.next_u64() & 1) ? 1.0 : -1.0;
      break;
    case ProbeKind::Zero:
      break;
  }
  return v;
}

}  // namespace

std::vector<double> lfh_weight_diag(const NetworkGraph& graph, const Dataset& data, int layer,
                                    int probes, std::uint64_t seed, ProbeKind probe_kind) {
  if (probes < 1) throw std::invalid_argument("probe count must be at least 1");
  if (data.size() == 0) throw std::invalid_argument("dataset is empty");
  if (layer < 0 || layer >= static_cast<int>(graph.layers.size()) ||
      !graph.layers[static_cast<std::size_t>(layer)].has_weights()) {
    throw std::invalid_argument("layer " + std::to_string(layer) + " has no weight tensor");
  }

  std::vector<double> h;
  const double norm = 1.0 / (static_cast<double>(probes) * static_cast<double>(data.size()));
  for (std::size_t s = 0; s < data.size(); ++s) {
    ForwardResult fwd = forward_record(graph, data.inputs[s]);
    const int w_node = fwd.tape.weight_node.at(layer);
    if (h.empty()) h.assign(fwd.tape.value(w_node).size(), 0.0);
    Rng rng = Rng::stream(seed, s);
    for (int m = 0; m < probes; ++m) {
      const Tensor v = draw_probe(rng, fwd.output.shape(), probe_kind);
      auto grads = vjp(fwd.tape, v, {w_node});
      const Tensor& g = grads.at(w_node);
      for (std::size_t i = 0; i < g.size(); ++i) h[i] += g[i] * g[i] * norm;
    }
  }
  return h;
}

std::map<std::pair<int, int>, double> sla_scores(const NetworkGraph& graph, const Dataset& data,
                                                 int probes, std::uint64_t seed,
                                                 ProbeKind probe_kind) {
  if (probes < 1) throw std::invalid_argument("probe count must be at least 1");
  if (data.size() == 0) throw std::invalid_argument("dataset is empty");
  if (graph.comparison_points.empty()) {
    throw std::invalid_argument("graph defines no comparison points");
  }

  std::map<std::pair<int, int>, double> out;
  for (std::size_t s = 0; s < data.size(); ++s) {
    ForwardResult fwd = forward_record(graph, data.inputs[s]);
    std::vector<int> targets;
    for (const auto& [layer, node] : fwd.tape.comparison_node) targets.push_back(node);

    std::map<int, std::vector<double>> acc;  // node -> running mean of squares
    for (int node : targets) acc[node].assign(fwd.tape.value(node).size(), 0.0);

    Rng rng = Rng::stream(seed, s);
    const double inv_m = 1.0 / static_cast<double>(probes);
    for (int m = 0; m < probes; ++m) {
      const Tensor v = draw_probe(rng, fwd.output.shape(), probe_kind);
      auto grads = vjp(fwd.tape, v, targets);
      for (int node : targets) {
        const Tensor& g = grads.at(node);
        auto& a = acc[node];
        for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i] * g[i] * inv_m;
      }
    }
    for (const auto& [layer, node] : fwd.tape.comparison_node) {
      double u_max = 0.0;
      for (double x : acc[node]) u_max = std::max(u_max, x);
      out[{static_cast<int>(s), layer}] = u_max;
    }
  }
  return out;
}

Matrix exact_gn_hessian(const NetworkGraph& graph, const Tensor& input, TargetRef target,
                        const LossHessianModel& loss) {
  ForwardResult fwd = forward_record(graph, input);
  const Matrix jac = finite_diff_jacobian(fwd.tape, resolve_target_node(fwd.tape, target));
  const Matrix a = loss_hessian(loss, fwd.output);

  // J^T A J via B = A J first.
  const std::size_t d_out = jac.rows, d_t = jac.cols;
  Matrix b(d_out, d_t);
  for (std::size_t i = 0; i < d_out; ++i) {
    for (std::size_t k = 0; k < d_out; ++k) {
      const double aik = a.at(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < d_t; ++j) b.at(i, j) += aik * jac.at(k, j);
    }
  }
  Matrix gn(d_t, d_t);
  for (std::size_t i = 0; i < d_t; ++i) {
    for (std::size_t k = 0; k < d_out; ++k) {
      const double jki = jac.at(k, i);
      if (jki == 0.0) continue;
      for (std::size_t j = 0; j < d_t; ++j) gn.at(i, j) += jki * b.at(k, j);
    }
  }
  return gn;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("spearman needs two equal-length vectors of size >= 2");
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

std::vector<double> log_normalize(const std::vector<double>& scores) {
  if (scores.size() < 2) throw std::invalid_argument("log_normalize needs at least two entries");
  double mn = scores[0], mx = scores[0];
  for (double x : scores) {
    if (!(x > 0.0)) throw std::invalid_argument("log_normalize requires positive entries");
    mn = std::min(mn, x);
    mx = std::max(mx, x);
  }
  if (mn == mx) throw std::invalid_argument("log_normalize requires a non-constant vector");
  const double c_min = std::log(mn), c_max = std::log(mx);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = (std::log(scores[i]) - c_min) / (c_max - c_min);
  }
  return out;
}

}  // namespace eptq
