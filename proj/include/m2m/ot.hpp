#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "m2m/error.hpp"
#include "m2m/nn.hpp"
#include "m2m/parallel.hpp"
#include "m2m/rng.hpp"
#include "m2m/tensor.hpp"

namespace m2m {

// Finitely supported probability measure: n atoms in R^d with non-negative
// weights summing to one.
struct EmpiricalMeasure {
  Tensor atoms;                 // (n, d)
  std::vector<double> weights;  // length n

  std::size_t n() const { return atoms.extent(0); }
  std::size_t dim() const { return atoms.extent(1); }

  void validate() const {
    if (atoms.rank() != 2 || n() == 0) throw validation_error("measure: atoms must be (n,d), n >= 1");
    if (weights.size() != n()) throw validation_error("measure: weight count must match atom count");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw validation_error("measure: weights must be non-negative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw validation_error("measure: weights sum to " + std::to_string(total) + ", expected 1");
    if (!atoms.all_finite()) throw numeric_error("measure: non-finite atom");
  }

  static EmpiricalMeasure uniform(Tensor atoms) {
    std::size_t n = atoms.extent(0);
    EmpiricalMeasure mu{std::move(atoms), std::vector<double>(n, 1.0 / static_cast<double>(n))};
    mu.validate();
    return mu;
  }

  static EmpiricalMeasure dirac(std::vector<double> point) {
    std::size_t d = point.size();
    return EmpiricalMeasure{Tensor({1, d}, std::move(point)), {1.0}};
  }
};

// Coupling matrix gamma over the product of two supports.
struct TransportPlan {
  Tensor gamma;  // (n, m), non-negative, total mass 1

  std::vector<double> row_sums() const {
    std::size_t n = gamma.extent(0), m = gamma.extent(1);
    std::vector<double> r(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) r[i] += gamma.at(i, j);
    return r;
  }

  std::vector<double> col_sums() const {
    std::size_t n = gamma.extent(0), m = gamma.extent(1);
    std::vector<double> c(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) c[j] += gamma.at(i, j);
    return c;
  }
};

inline double euclidean(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  std::size_t d = a.extent(1);
  double acc = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double diff = a.at(i, k) - b.at(j, k);
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

namespace detail {

// Primal network simplex on the dense bipartite transportation graph, with
// a root node and big-cost artificial arcs forming the initial basis. Block
// pivot search; leaving-arc tie-breaking keeps the basis strongly feasible
// so degenerate instances cannot cycle.
class TransportSimplex {
 public:
  TransportSimplex(const Tensor& src, const std::vector<double>& sw, const Tensor& dst,
                   const std::vector<double>& dw)
      : n_(sw.size()), m_(dw.size()), root_(n_ + m_), bip_(n_ * m_), arcs_(bip_ + n_ + m_) {
    cost_.resize(bip_);
    double max_c = 0.0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < m_; ++j) {
        double c = euclidean(src, i, dst, j);
        cost_[i * m_ + j] = c;
        max_c = std::max(max_c, c);
      }
    big_ = (max_c + 1.0) * static_cast<double>(n_ + m_ + 1);
    tol_ = 1e-10 * (1.0 + max_c);

    flow_.assign(arcs_, 0.0);
    in_tree_.assign(arcs_, false);
    parent_.assign(root_ + 1, -1);
    pred_.assign(root_ + 1, -1);
    up_.assign(root_ + 1, false);
    pot_.assign(root_ + 1, 0.0);
    depth_.assign(root_ + 1, 0);

    for (std::size_t i = 0; i < n_; ++i) {
      int a = static_cast<int>(bip_ + i);
      parent_[i] = static_cast<int>(root_);
      pred_[i] = a;
      up_[i] = true;  // source -> root
      flow_[a] = sw[i];
      in_tree_[a] = true;
      pot_[i] = -big_;
      depth_[i] = 1;
    }
    for (std::size_t j = 0; j < m_; ++j) {
      int node = static_cast<int>(n_ + j);
      int a = static_cast<int>(bip_ + n_ + j);
      parent_[node] = static_cast<int>(root_);
      pred_[node] = a;
      up_[node] = false;  // root -> sink
      flow_[a] = dw[j];
      in_tree_[a] = true;
      pot_[node] = big_;
      depth_[node] = 1;
    }
  }

  void run() {
    std::size_t block = std::max<std::size_t>(10, static_cast<std::size_t>(std::sqrt(
                                                      static_cast<double>(arcs_))));
    std::size_t max_pivots = 1000 + 10 * arcs_;
    std::size_t pivots = 0;
    std::size_t next_arc = 0;
    while (true) {
      int entering = find_entering(block, next_arc);
      if (entering < 0) break;
      if (++pivots > max_pivots)
        throw numeric_error("exact_w1: simplex exceeded " + std::to_string(max_pivots) +
                            " pivots (reduced cost " + std::to_string(reduced_cost(entering)) + ")");
      pivot(entering);
    }
    for (std::size_t a = bip_; a < arcs_; ++a)
      if (flow_[a] > 1e-9)
        throw numeric_error("exact_w1: artificial arc kept flow " + std::to_string(flow_[a]));
  }

  double total_cost() const {
    double c = 0.0;
    for (std::size_t a = 0; a < bip_; ++a) c += flow_[a] * cost_[a];
    return c;
  }

  Tensor plan() const {
    Tensor g = Tensor::zeros({n_, m_});
    for (std::size_t a = 0; a < bip_; ++a) g[a] = std::max(flow_[a], 0.0);
    return g;
  }

 private:
  int tail(int a) const {
    std::size_t u = static_cast<std::size_t>(a);
    if (u < bip_) return static_cast<int>(u / m_);
    if (u < bip_ + n_) return static_cast<int>(u - bip_);  // source -> root
    return static_cast<int>(root_);                        // root -> sink
  }

  int head(int a) const {
    std::size_t u = static_cast<std::size_t>(a);
    if (u < bip_) return static_cast<int>(n_ + u % m_);
    if (u < bip_ + n_) return static_cast<int>(root_);
    return static_cast<int>(n_ + (u - bip_ - n_));
  }

  double arc_cost(int a) const {
    return static_cast<std::size_t>(a) < bip_ ? cost_[static_cast<std::size_t>(a)] : big_;
  }

  double reduced_cost(int a) const { return arc_cost(a) + pot_[tail(a)] - pot_[head(a)]; }

  int find_entering(std::size_t block, std::size_t& next_arc) {
    double best = -tol_;
    int candidate = -1;
    std::size_t scanned = 0;
    while (scanned < arcs_) {
      std::size_t stop = std::min(arcs_, scanned + block);
      for (; scanned < stop; ++scanned) {
        std::size_t a = next_arc;
        next_arc = next_arc + 1 == arcs_ ? 0 : next_arc + 1;
        if (in_tree_[a]) continue;
        double rc = reduced_cost(static_cast<int>(a));
        if (rc < best) {
          best = rc;
          candidate = static_cast<int>(a);
        }
      }
      if (candidate >= 0) return candidate;
    }
    return -1;
  }

  void pivot(int entering) {
    int first = tail(entering), second = head(entering);

    int join = first, other = second;
    while (join != other) {
      if (depth_[join] > depth_[other])
        join = parent_[join];
      else
        other = parent_[other];
    }

    // leaving arc: strict < on the tail-side path, <= on the head side
    double delta = std::numeric_limits<double>::infinity();
    int u_out = -1;
    bool out_on_tail_side = true;
    for (int u = first; u != join; u = parent_[u]) {
      double d = up_[u] ? flow_[pred_[u]] : std::numeric_limits<double>::infinity();
      if (d < delta) {
        delta = d;
        u_out = u;
        out_on_tail_side = true;
      }
    }
    for (int u = second; u != join; u = parent_[u]) {
      double d = up_[u] ? std::numeric_limits<double>::infinity() : flow_[pred_[u]];
      if (d <= delta) {
        delta = d;
        u_out = u;
        out_on_tail_side = false;
      }
    }
    if (u_out < 0) throw numeric_error("exact_w1: unbounded pivot");

    if (delta > 0.0) {
      flow_[entering] += delta;
      for (int u = first; u != join; u = parent_[u]) flow_[pred_[u]] += up_[u] ? -delta : delta;
      for (int u = second; u != join; u = parent_[u]) flow_[pred_[u]] += up_[u] ? delta : -delta;
    }

    int leaving = pred_[u_out];
    flow_[leaving] = 0.0;  // it left at its bound; clear accumulated drift
    in_tree_[leaving] = false;
    in_tree_[entering] = true;

    // re-root the cut-off subtree at the entering arc's endpoint inside it
    int p = out_on_tail_side ? first : second;
    int q = out_on_tail_side ? second : first;
    int w = p, pa = parent_[w], parc = pred_[w];
    bool pup = up_[w];
    parent_[p] = q;
    pred_[p] = entering;
    up_[p] = tail(entering) == p;
    while (w != u_out) {
      int gpa = parent_[pa], gparc = pred_[pa];
      bool gpup = up_[pa];
      parent_[pa] = w;
      pred_[pa] = parc;
      up_[pa] = !pup;
      w = pa;
      pa = gpa;
      parc = gparc;
      pup = gpup;
    }

    refresh_tree();
  }

  // Recompute depths and potentials below the root. O(V) with a bucketed
  // child scan; cheap next to the O(n*m) pivot search.
  void refresh_tree() {
    std::size_t v_count = root_ + 1;
    std::vector<int> cfirst(v_count, -1), cnext(v_count, -1);
    for (std::size_t v = 0; v < root_; ++v) {
      int par = parent_[v];
      cnext[v] = cfirst[par];
      cfirst[par] = static_cast<int>(v);
    }
    std::vector<int> stack{static_cast<int>(root_)};
    pot_[root_] = 0.0;
    depth_[root_] = 0;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int c = cfirst[v]; c >= 0; c = cnext[c]) {
        depth_[c] = depth_[v] + 1;
        double cost = arc_cost(pred_[c]);
        pot_[c] = up_[c] ? pot_[v] - cost : pot_[v] + cost;
        stack.push_back(c);
      }
    }
  }

  std::size_t n_, m_, root_, bip_, arcs_;
  double big_ = 0.0, tol_ = 0.0;
  std::vector<double> cost_, flow_, pot_;
  std::vector<bool> in_tree_;
  std::vector<int> parent_, pred_;
  std::vector<bool> up_;
  std::vector<int> depth_;
};

}  // namespace detail

// Exact Wasserstein-1 distance under the Euclidean ground metric, with the
// optimal coupling. Solved as a min-cost flow on the complete bipartite
// graph; inputs are capped at 10^6 atom pairs (use sliced_w1 beyond that).
inline std::pair<double, TransportPlan> exact_w1(const EmpiricalMeasure& mu,
                                                 const EmpiricalMeasure& nu) {
  mu.validate();
  nu.validate();
  if (mu.dim() != nu.dim())
    throw validation_error("exact_w1: dimension mismatch " + std::to_string(mu.dim()) + " vs " +
                           std::to_string(nu.dim()));
  if (mu.n() * nu.n() > 1000000)
    throw validation_error("exact_w1: instance exceeds 10^6 atom pairs; use sliced_w1");

  detail::TransportSimplex simplex(mu.atoms, mu.weights, nu.atoms, nu.weights);
  simplex.run();
  return {simplex.total_cost(), TransportPlan{simplex.plan()}};
}

// Closed form in one dimension: integrate |F_mu - F_nu| between the merged
// support points.
inline double w1_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  mu.validate();
  nu.validate();
  if (mu.dim() != 1 || nu.dim() != 1) throw validation_error("w1_1d: measures must be 1-d");

  auto sorted = [](const EmpiricalMeasure& m) {
    std::vector<std::pair<double, double>> xs(m.n());
    for (std::size_t i = 0; i < m.n(); ++i) xs[i] = {m.atoms[i], m.weights[i]};
    std::sort(xs.begin(), xs.end());
    return xs;
  };
  auto a = sorted(mu), b = sorted(nu);

  double cost = 0.0, fa = 0.0, fb = 0.0;
  double prev = std::min(a.front().first, b.front().first);
  std::size_t i = 0, j = 0;
  while (i < a.size() || j < b.size()) {
    double x = i < a.size() && (j == b.size() || a[i].first <= b[j].first) ? a[i].first
                                                                           : b[j].first;
    cost += std::abs(fa - fb) * (x - prev);
    while (i < a.size() && a[i].first == x) fa += a[i++].second;
    while (j < b.size() && b[j].first == x) fb += b[j++].second;
    prev = x;
  }
  return cost;
}

inline EmpiricalMeasure project_1d(const EmpiricalMeasure& mu, const std::vector<double>& dir) {
  std::size_t n = mu.n(), d = mu.dim();
  Tensor proj = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) acc += mu.atoms.at(i, k) * dir[k];
    proj[i] = acc;
  }
  return EmpiricalMeasure{std::move(proj), mu.weights};
}

// Average 1-d transport cost over random unit directions. A lower estimate of
// exact_w1 (projections are 1-Lipschitz); deterministic in the seed, and the
// reduction order is fixed regardless of the thread count.
inline double sliced_w1(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                        std::size_t n_projections, std::uint64_t seed) {
  mu.validate();
  nu.validate();
  if (mu.dim() != nu.dim()) throw validation_error("sliced_w1: dimension mismatch");
  if (n_projections < 1) throw validation_error("sliced_w1: need at least one projection");

  std::size_t d = mu.dim();
  Rng rng(mix_seed(seed, "sliced_w1"));
  std::vector<std::vector<double>> dirs(n_projections);
  for (auto& dir : dirs) dir = rng.unit_vector(d);

  std::vector<double> per_dir(n_projections, 0.0);
  parallel_for(n_projections, [&](std::size_t p) {
    per_dir[p] = w1_1d(project_1d(mu, dirs[p]), project_1d(nu, dirs[p]));
  });
  double total = 0.0;
  for (double v : per_dir) total += v;
  return total / static_cast<double>(n_projections);
}

// Image measure under a map applied to all atoms at once; weights unchanged.
template <typename MapFn>
inline EmpiricalMeasure pushforward(const EmpiricalMeasure& mu, MapFn&& f) {
  Tensor mapped = f(mu.atoms);
  if (mapped.rank() != 2 || mapped.extent(0) != mu.n())
    throw validation_error("pushforward: map must preserve the atom count");
  EmpiricalMeasure out{std::move(mapped), mu.weights};
  out.validate();
  return out;
}

inline EmpiricalMeasure pushforward(const EmpiricalMeasure& mu, const Network& net) {
  return pushforward(mu, [&](const Tensor& x) { return forward(net, x, Mode::eval); });
}

namespace detail {

// Spectral norm by power iteration on B^T B; 200 rounds or relative change
// below 1e-10, whichever first. Deterministic seeded start.
inline double spectral_norm(const Tensor& b, std::uint64_t seed) {
  std::size_t rows = b.extent(0), cols = b.extent(1);
  Rng rng(mix_seed(seed, "spectral"));
  std::vector<double> y(cols), t(rows);
  for (auto& v : y) v = rng.uniform(-1.0, 1.0) + 1e-3;

  double rho = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    // t = B y ; z = B^T t
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += b.at(i, j) * y[j];
      t[i] = acc;
    }
    std::vector<double> z(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      double ti = t[i];
      if (ti == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) z[j] += b.at(i, j) * ti;
    }
    double ynorm2 = 0.0, zy = 0.0, znorm = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      ynorm2 += y[j] * y[j];
      zy += z[j] * y[j];
      znorm += z[j] * z[j];
    }
    double next = zy / ynorm2;  // Rayleigh quotient of B^T B
    znorm = std::sqrt(znorm);
    if (znorm == 0.0) return 0.0;  // B annihilates the iterate: zero map
    for (std::size_t j = 0; j < cols; ++j) y[j] = z[j] / znorm;
    if (iter > 0 && std::abs(next - rho) <= 1e-10 * std::max(1.0, std::abs(next)))
      return std::sqrt(std::max(next, 0.0));
    rho = next;
  }
  double residual = 0.0;
  for (std::size_t i = 0; i < rows; ++i) residual += t[i] * t[i];
  throw numeric_error("spectral_norm: power iteration did not settle after 200 rounds (|By|^2 = " +
                      std::to_string(residual) + ")");
}

}  // namespace detail

// Certified Lipschitz upper bound: the product of per-layer operator norms.
// Batch-norm layers contribute their eval-mode diagonal scale folded into the
// adjacent weight matrix; relu/tanh are 1-Lipschitz.
inline double lipschitz_upper(const Network& net) {
  double bound = 1.0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const NetLayer& layer = net.layers[li];
    Tensor w = layer.weight;
    if (layer.bn) {
      std::size_t out = w.extent(1);
      for (std::size_t k = 0; k < out; ++k) {
        double scale =
            layer.bn->gamma[k] / std::sqrt(layer.bn->running_var[k] + kBnEps);
        for (std::size_t i = 0; i < w.extent(0); ++i) w.at(i, k) *= scale;
      }
    }
    bound *= detail::spectral_norm(w, mix_seed(0x5eed, li));
  }
  return bound;
}

// Upper bound for a composed chain (applied left to right).
inline double lipschitz_upper(const std::vector<const Network*>& chain) {
  double bound = 1.0;
  for (const Network* net : chain) bound *= lipschitz_upper(*net);
  return bound;
}

// Empirical lower witness: the largest difference quotient over sample pairs.
template <typename MapFn>
inline double lipschitz_lower(MapFn&& f, const EmpiricalMeasure& samples) {
  samples.validate();
  if (samples.n() < 2) throw validation_error("lipschitz_lower: need at least two atoms");
  Tensor mapped = f(samples.atoms);
  std::size_t n = samples.n();
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double dx = euclidean(samples.atoms, i, samples.atoms, j);
      if (dx == 0.0) continue;
      double dy = euclidean(mapped, i, mapped, j);
      best = std::max(best, dy / dx);
    }
  if (best < 0.0) throw validation_error("lipschitz_lower: all atoms identical");
  return best;
}

inline double lipschitz_lower(const Network& net, const EmpiricalMeasure& samples) {
  return lipschitz_lower([&](const Tensor& x) { return forward(net, x, Mode::eval); }, samples);
}

// Weighted mean and covariance, symmetrized.
struct GaussianSummary {
  std::vector<double> mean;
  Tensor covariance;  // (d, d)

  std::size_t dim() const { return mean.size(); }
};

inline GaussianSummary fit_gaussian(const EmpiricalMeasure& mu) {
  mu.validate();
  if (mu.n() < 2) throw validation_error("fit_gaussian: need at least two atoms");
  std::size_t n = mu.n(), d = mu.dim();
  GaussianSummary g;
  g.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) g.mean[k] += mu.weights[i] * mu.atoms.at(i, k);
  g.covariance = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < n; ++i) {
    double w = mu.weights[i];
    if (w == 0.0) continue;
    for (std::size_t a = 0; a < d; ++a) {
      double da = mu.atoms.at(i, a) - g.mean[a];
      for (std::size_t b = a; b < d; ++b) {
        double v = w * da * (mu.atoms.at(i, b) - g.mean[b]);
        g.covariance.at(a, b) += v;
      }
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) g.covariance.at(a, b) = g.covariance.at(b, a);
  return g;
}

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  std::size_t r = t.extent(0), c = t.extent(1);
  Eigen::MatrixXd m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
  return m;
}

// PSD square root via eigendecomposition, negative eigenvalues clamped at 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tolerance,
                                const char* what) {
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw numeric_error(std::string(what) + ": eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tolerance)
      throw validation_error(std::string(what) + ": matrix is not PSD (eigenvalue " +
                             std::to_string(ev(i)) + ")");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Fréchet distance between the two Gaussian summaries:
//   FD^2 = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
// The inner square root uses the symmetrized product for numerical symmetry.
inline double frechet_gaussian_distance(const GaussianSummary& a, const GaussianSummary& b) {
  if (a.dim() != b.dim()) throw validation_error("frechet: dimension mismatch");
  std::size_t d = a.dim();
  double mean_sq = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double diff = a.mean[k] - b.mean[k];
    mean_sq += diff * diff;
  }
  Eigen::MatrixXd sa = detail::to_eigen(a.covariance);
  Eigen::MatrixXd sb = detail::to_eigen(b.covariance);
  double asym = (sa - sa.transpose()).cwiseAbs().maxCoeff() +
                (sb - sb.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-10) throw validation_error("frechet: covariance not symmetric");

  Eigen::MatrixXd ra = detail::psd_sqrt(sa, 1e-8, "frechet");
  Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::MatrixXd cross = detail::psd_sqrt(inner, 1e-8, "frechet");
  double tr = sa.trace() + sb.trace() - 2.0 * cross.trace();
  double fd2 = mean_sq + tr;
  return std::sqrt(std::max(fd2, 0.0));
}

}  // namespace m2m
