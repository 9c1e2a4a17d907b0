#include "txd/reml_evaluator.hpp"

#include <cmath>
#include <numbers>
#include <optional>

#include "txd/anova.hpp"
#include "txd/error.hpp"
#include "txd/kernels.hpp"
#include "txd/lattice.hpp"

namespace txd {

namespace {

double dot2(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return kernels::dot(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                      std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

// H1 and log|X'V1^-1 X| from the p×p cross-product.
void invert_xvx(const Eigen::MatrixXd& xvx, UnitEval& e) {
  Eigen::LLT<Eigen::MatrixXd> llt(xvx);
  if (llt.info() != Eigen::Success) throw StructuralError("fixed-effect design is rank deficient");
  e.logdet_XVX1 = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  e.H1 = llt.solve(Eigen::MatrixXd::Identity(xvx.rows(), xvx.cols()));
}

// Z_k' v: per-level sums of the rows of v.
Eigen::MatrixXd aggregate(const Factor& f, const Eigen::MatrixXd& v) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(f.n_levels(), v.cols());
  for (std::size_t u = 0; u < f.n_units(); ++u) out.row(f.level(u)) += v.row(static_cast<Eigen::Index>(u));
  return out;
}

Eigen::VectorXd aggregate(const Factor& f, const Eigen::VectorXd& v) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(f.n_levels());
  for (std::size_t u = 0; u < f.n_units(); ++u) out[f.level(u)] += v[static_cast<Eigen::Index>(u)];
  return out;
}

std::vector<Eigen::Index> term_offsets(const std::vector<Factor>& terms) {
  std::vector<Eigen::Index> off(terms.size() + 1, 0);
  for (std::size_t k = 0; k < terms.size(); ++k) off[k + 1] = off[k] + terms[k].n_levels();
  return off;
}

// ½ tr(P1 J_k P1 J_l) from P1 Z with Z = [Z_1 .. Z_K]. The residual row
// uses tr(P1²) = tr(P1) − Σ γ_k ‖P1 Z_k‖², which follows from P1 V1 P1 = P1.
Eigen::MatrixXd ei_from_pz(const std::vector<Factor>& terms, const Eigen::MatrixXd& PZ, const Eigen::VectorXd& gamma,
                           std::size_t n, std::size_t p) {
  const auto K = static_cast<Eigen::Index>(terms.size());
  const auto off = term_offsets(terms);
  Eigen::MatrixXd ei = Eigen::MatrixXd::Zero(K + 1, K + 1);
  double tr_p = static_cast<double>(n - p);
  for (Eigen::Index k = 0; k < K; ++k) {
    const Eigen::MatrixXd A = aggregate(terms[static_cast<std::size_t>(k)], PZ);
    const Eigen::Index qk = off[static_cast<std::size_t>(k) + 1] - off[static_cast<std::size_t>(k)];
    for (Eigen::Index l = 0; l < K; ++l) {
      const Eigen::Index ql = off[static_cast<std::size_t>(l) + 1] - off[static_cast<std::size_t>(l)];
      ei(k, l) = 0.5 * A.middleCols(off[static_cast<std::size_t>(l)], ql).squaredNorm();
    }
    tr_p -= gamma[k] * A.block(0, off[static_cast<std::size_t>(k)], qk, qk).trace();
    ei(k, K) = ei(K, k) = 0.5 * PZ.middleCols(off[static_cast<std::size_t>(k)], qk).squaredNorm();
  }
  double tr_p2 = tr_p;
  for (Eigen::Index k = 0; k < K; ++k) tr_p2 -= gamma[k] * 2.0 * ei(k, K);
  ei(K, K) = 0.5 * tr_p2;
  return 0.5 * (ei + ei.transpose());
}

void check_problem(const RemlProblem& p) {
  if (p.X.rows() != p.y.size()) throw UsageError("fixed-effect design and outcome lengths differ");
  for (const auto& t : p.terms) {
    if (t.n_units() != p.n()) throw UsageError("random term '" + t.name() + "' has the wrong length");
  }
}

// ---------------------------------------------------------------------------

class DenseEvaluator final : public RemlEvaluator {
 public:
  explicit DenseEvaluator(const RemlProblem& p) : p_(p) {
    check_problem(p_);
    for (const auto& t : p_.terms) {
      const auto n = static_cast<Eigen::Index>(p_.n());
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          if (t.level(static_cast<std::size_t>(i)) == t.level(static_cast<std::size_t>(j))) J(i, j) = 1.0;
        }
      }
      J_.push_back(std::move(J));
    }
  }

  std::string name() const override { return "dense"; }

  UnitEval evaluate(const Eigen::VectorXd& gamma, bool need_ai) const override {
    const auto n = static_cast<Eigen::Index>(p_.n());
    const std::size_t K = p_.k();
    Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n);
    for (std::size_t k = 0; k < K; ++k) V += gamma[static_cast<Eigen::Index>(k)] * J_[k];
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    if (llt.info() != Eigen::Success) throw StructuralError("covariance matrix is not positive definite");
    UnitEval e;
    e.logdet_V1 = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::MatrixXd Vinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd W = Vinv * p_.X;
    invert_xvx(p_.X.transpose() * W, e);
    e.beta = e.H1 * (W.transpose() * p_.y);
    const Eigen::MatrixXd P = Vinv - W * e.H1 * W.transpose();
    const Eigen::VectorXd Py = P * p_.y;
    e.r2 = p_.y.dot(Py);
    e.tr_PJ.resize(static_cast<Eigen::Index>(K));
    e.q.resize(static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) {
      e.tr_PJ[static_cast<Eigen::Index>(k)] = P.cwiseProduct(J_[k]).sum();
      e.q[static_cast<Eigen::Index>(k)] = Py.dot(J_[k] * Py);
      e.dvar_beta.push_back(e.H1 * (W.transpose() * J_[k] * W) * e.H1);
    }
    e.tr_P = P.trace();
    e.q_e = Py.squaredNorm();
    e.dvar_beta.push_back(e.H1 * (W.transpose() * W) * e.H1);
    if (need_ai) {
      Eigen::MatrixXd U(n, static_cast<Eigen::Index>(K + 1));
      for (std::size_t k = 0; k < K; ++k) U.col(static_cast<Eigen::Index>(k)) = J_[k] * Py;
      U.col(static_cast<Eigen::Index>(K)) = Py;
      e.AI = 0.5 * U.transpose() * P * U;
      e.has_ai = true;
    }
    return e;
  }

  Eigen::MatrixXd expected_information(const Eigen::VectorXd& gamma) const override {
    const auto n = static_cast<Eigen::Index>(p_.n());
    Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n);
    for (std::size_t k = 0; k < p_.k(); ++k) V += gamma[static_cast<Eigen::Index>(k)] * J_[k];
    const Eigen::MatrixXd Vinv = V.llt().solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd W = Vinv * p_.X;
    const Eigen::MatrixXd P = Vinv - W * (p_.X.transpose() * W).inverse() * W.transpose();
    const auto off = term_offsets(p_.terms);
    Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, off.back());
    for (std::size_t k = 0; k < p_.k(); ++k) {
      for (std::size_t u = 0; u < p_.n(); ++u) Z(static_cast<Eigen::Index>(u), off[k] + p_.terms[k].level(u)) = 1.0;
    }
    return ei_from_pz(p_.terms, P * Z, gamma, p_.n(), p_.p());
  }

 private:
  RemlProblem p_;
  std::vector<Eigen::MatrixXd> J_;
};

// ---------------------------------------------------------------------------

class BlockEvaluator final : public RemlEvaluator {
 public:
  BlockEvaluator(const RemlProblem& p, int block_term) : p_(p) {
    check_problem(p_);
    const std::size_t K = p_.k();
    if (block_term == -2) block_term = choose_grouping();
    Factor g;
    if (block_term == -1) {
      g = Factor::universal(p_.n());
    } else if (block_term == -3) {
      g = Factor::equality(p_.n());
    } else {
      g = p_.terms.at(static_cast<std::size_t>(block_term));
    }
    grouping_ = block_term;
    inner_.resize(K);
    for (std::size_t k = 0; k < K; ++k) inner_[k] = is_finer(p_.terms[k], g);
    blocks_.resize(static_cast<std::size_t>(g.n_levels()));
    for (std::size_t u = 0; u < p_.n(); ++u) blocks_[static_cast<std::size_t>(g.level(u))].push_back(static_cast<Eigen::Index>(u));
    blev_.resize(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blev_[b].resize(K);
      for (std::size_t k = 0; k < K; ++k) {
        blev_[b][k].reserve(blocks_[b].size());
        for (auto u : blocks_[b]) blev_[b][k].push_back(p_.terms[k].level(static_cast<std::size_t>(u)));
      }
    }
  }

  std::string name() const override {
    if (grouping_ == -1) return "block(single)";
    if (grouping_ == -3) return "block(none)";
    return "block(" + p_.terms[static_cast<std::size_t>(grouping_)].name() + ")";
  }

  UnitEval evaluate(const Eigen::VectorXd& gamma, bool need_ai) const override {
    Workspace ws;
    UnitEval e;
    e.logdet_V1 = factorise(gamma, ws);
    const std::size_t K = p_.k();
    const auto n = static_cast<Eigen::Index>(p_.n());

    const Eigen::MatrixXd W = apply_inverse(ws, p_.X);
    invert_xvx(p_.X.transpose() * W, e);
    const Eigen::VectorXd Vy = apply_inverse(ws, Eigen::MatrixXd(p_.y)).col(0);
    e.beta = e.H1 * (p_.X.transpose() * Vy);
    const Eigen::VectorXd Py = Vy - W * e.beta;
    e.r2 = dot2(p_.y, Py);

    // F = L_M^{-1} C' lets every Woodbury trace correction be a column sum.
    Eigen::MatrixXd F;
    if (ws.r > 0) F = ws.llt_m.matrixL().solve(ws.C.transpose());

    e.tr_PJ.resize(static_cast<Eigen::Index>(K));
    e.q.resize(static_cast<Eigen::Index>(K));
    std::vector<Eigen::VectorXd> zpy(K);
    for (std::size_t k = 0; k < K; ++k) {
      const Factor& t = p_.terms[k];
      double tr = 0.0;
      for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& Di = ws.dinv[b];
        const auto& lev = blev_[b][k];
        for (std::size_t i = 0; i < lev.size(); ++i) {
          tr += kernels::masked_sum(std::span<const double>(Di.col(static_cast<Eigen::Index>(i)).data(), lev.size()), lev,
                                    lev[i]);
        }
      }
      if (ws.r > 0) tr -= aggregate(t, Eigen::MatrixXd(F.transpose())).squaredNorm();
      const Eigen::MatrixXd zw = aggregate(t, W);
      const Eigen::MatrixXd A = zw.transpose() * zw;
      e.tr_PJ[static_cast<Eigen::Index>(k)] = tr - (e.H1 * A).trace();
      e.dvar_beta.push_back(e.H1 * A * e.H1);
      zpy[k] = aggregate(t, Py);
      e.q[static_cast<Eigen::Index>(k)] = zpy[k].squaredNorm();
    }
    e.tr_P = static_cast<double>(p_.n() - p_.p());
    for (std::size_t k = 0; k < K; ++k) e.tr_P -= gamma[static_cast<Eigen::Index>(k)] * e.tr_PJ[static_cast<Eigen::Index>(k)];
    e.q_e = dot2(Py, Py);
    e.dvar_beta.push_back(e.H1 * (W.transpose() * W) * e.H1);

    if (need_ai) {
      Eigen::MatrixXd U(n, static_cast<Eigen::Index>(K + 1));
      for (std::size_t k = 0; k < K; ++k) {
        const Factor& t = p_.terms[k];
        for (std::size_t u = 0; u < p_.n(); ++u) U(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(k)) = zpy[k][t.level(u)];
      }
      U.col(static_cast<Eigen::Index>(K)) = Py;
      Eigen::MatrixXd PU = apply_inverse(ws, U);
      PU -= W * (e.H1 * (W.transpose() * U));
      e.AI = 0.5 * U.transpose() * PU;
      e.AI = 0.5 * (e.AI + e.AI.transpose()).eval();
      e.has_ai = true;
    }
    return e;
  }

  Eigen::MatrixXd expected_information(const Eigen::VectorXd& gamma) const override {
    Workspace ws;
    factorise(gamma, ws);
    const std::size_t K = p_.k();
    const auto n = static_cast<Eigen::Index>(p_.n());
    const auto off = term_offsets(p_.terms);
    const Eigen::Index Q = off.back();
    // D^-1 Z: indicator columns make each block product a sum of columns.
    Eigen::MatrixXd VZ = Eigen::MatrixXd::Zero(n, Q);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& units = blocks_[b];
      const auto& Di = ws.dinv[b];
      for (std::size_t k = 0; k < K; ++k) {
        const auto& lev = blev_[b][k];
        for (std::size_t j = 0; j < units.size(); ++j) {
          const Eigen::Index col = off[k] + lev[j];
          for (std::size_t i = 0; i < units.size(); ++i) {
            VZ(units[i], col) += Di(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          }
        }
      }
    }
    if (ws.r > 0) {
      Eigen::MatrixXd CZ = Eigen::MatrixXd::Zero(ws.r, Q);
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t u = 0; u < p_.n(); ++u) {
          CZ.col(off[k] + p_.terms[k].level(u)) += ws.C.row(static_cast<Eigen::Index>(u)).transpose();
        }
      }
      ws.llt_m.solveInPlace(CZ);
      VZ -= ws.C * CZ;
    }
    const Eigen::MatrixXd W = apply_inverse(ws, p_.X);
    const Eigen::MatrixXd H1 = (p_.X.transpose() * W).llt().solve(Eigen::MatrixXd::Identity(p_.X.cols(), p_.X.cols()));
    Eigen::MatrixXd WZ = Eigen::MatrixXd::Zero(p_.X.cols(), Q);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t u = 0; u < p_.n(); ++u) {
        WZ.col(off[k] + p_.terms[k].level(u)) += W.row(static_cast<Eigen::Index>(u)).transpose();
      }
    }
    VZ -= W * (H1 * WZ);
    return ei_from_pz(p_.terms, VZ, gamma, p_.n(), p_.p());
  }

 private:
  struct Workspace {
    std::vector<Eigen::MatrixXd> dinv;
    std::vector<std::size_t> active;      // outer terms with γ > 0
    std::vector<Eigen::Index> offset;     // column offset per active term
    std::vector<double> root;             // sqrt γ per active term
    Eigen::Index r = 0;
    Eigen::MatrixXd C;                    // D^-1 Z_r Λ^½
    Eigen::LLT<Eigen::MatrixXd> llt_m;
  };

  int choose_grouping() const {
    const std::size_t K = p_.k();
    const double n = static_cast<double>(p_.n());
    double best_cost = 0.0;
    int best = -3;
    for (int cand = -3; cand < static_cast<int>(K); ++cand) {
      if (cand == -2) continue;
      Factor g = cand == -1 ? Factor::universal(p_.n())
                            : cand == -3 ? Factor::equality(p_.n()) : p_.terms[static_cast<std::size_t>(cand)];
      double r = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        if (!is_finer(p_.terms[k], g)) r += p_.terms[k].n_levels();
      }
      double cost = r * r * r / 3.0 + 2.0 * n * r * r;
      double sq = 0.0;
      for (auto s : g.level_sizes()) {
        const double sd = s;
        cost += sd * sd * sd + sd * sd * (static_cast<double>(K) + r);
        sq += sd;
      }
      if (cand == -3 || cost < best_cost) {
        best_cost = cost;
        best = cand;
      }
    }
    return best;
  }

  double factorise(const Eigen::VectorXd& gamma, Workspace& ws) const {
    const std::size_t K = p_.k();
    double logdet = 0.0;
    ws.dinv.resize(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto nb = static_cast<Eigen::Index>(blocks_[b].size());
      Eigen::MatrixXd D = Eigen::MatrixXd::Identity(nb, nb);
      for (std::size_t k = 0; k < K; ++k) {
        const double g = gamma[static_cast<Eigen::Index>(k)];
        if (!inner_[k] || g == 0.0) continue;
        const auto& lev = blev_[b][k];
        for (Eigen::Index i = 0; i < nb; ++i) {
          kernels::add_level_matches(std::span<double>(D.col(i).data(), lev.size()), lev,
                                     lev[static_cast<std::size_t>(i)], g);
        }
      }
      Eigen::LLT<Eigen::MatrixXd> llt(D);
      if (llt.info() != Eigen::Success) throw StructuralError("block covariance is not positive definite");
      logdet += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
      ws.dinv[b] = llt.solve(Eigen::MatrixXd::Identity(nb, nb));
    }

    ws.active.clear();
    ws.offset.clear();
    ws.root.clear();
    ws.r = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const double g = gamma[static_cast<Eigen::Index>(k)];
      if (inner_[k] || g <= 0.0) continue;
      ws.active.push_back(k);
      ws.offset.push_back(ws.r);
      ws.root.push_back(std::sqrt(g));
      ws.r += p_.terms[k].n_levels();
    }
    if (ws.r == 0) return logdet;

    const auto n = static_cast<Eigen::Index>(p_.n());
    ws.C = Eigen::MatrixXd::Zero(n, ws.r);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& units = blocks_[b];
      const auto& Di = ws.dinv[b];
      for (std::size_t j = 0; j < units.size(); ++j) {
        for (std::size_t a = 0; a < ws.active.size(); ++a) {
          const std::size_t k = ws.active[a];
          const Eigen::Index col = ws.offset[a] + blev_[b][k][j];
          const double w = ws.root[a];
          for (std::size_t i = 0; i < units.size(); ++i) {
            ws.C(units[i], col) += w * Di(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          }
        }
      }
    }
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(ws.r, ws.r);
    for (Eigen::Index u = 0; u < n; ++u) {
      for (std::size_t a = 0; a < ws.active.size(); ++a) {
        const std::size_t k = ws.active[a];
        const Eigen::Index row = ws.offset[a] + p_.terms[k].level(static_cast<std::size_t>(u));
        M.row(row) += ws.root[a] * ws.C.row(u);
      }
    }
    M = 0.5 * (M + M.transpose()).eval();
    ws.llt_m.compute(M);
    if (ws.llt_m.info() != Eigen::Success) throw StructuralError("Woodbury core is not positive definite");
    logdet += 2.0 * ws.llt_m.matrixLLT().diagonal().array().log().sum();
    return logdet;
  }

  Eigen::MatrixXd apply_inverse(const Workspace& ws, const Eigen::MatrixXd& B) const {
    Eigen::MatrixXd T(B.rows(), B.cols());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& units = blocks_[b];
      Eigen::MatrixXd local(static_cast<Eigen::Index>(units.size()), B.cols());
      for (std::size_t i = 0; i < units.size(); ++i) local.row(static_cast<Eigen::Index>(i)) = B.row(units[i]);
      const Eigen::MatrixXd out = ws.dinv[b] * local;
      for (std::size_t i = 0; i < units.size(); ++i) T.row(units[i]) = out.row(static_cast<Eigen::Index>(i));
    }
    if (ws.r == 0) return T;
    Eigen::MatrixXd Wm = Eigen::MatrixXd::Zero(ws.r, B.cols());
    for (Eigen::Index u = 0; u < B.rows(); ++u) {
      for (std::size_t a = 0; a < ws.active.size(); ++a) {
        const std::size_t k = ws.active[a];
        Wm.row(ws.offset[a] + p_.terms[k].level(static_cast<std::size_t>(u))) += ws.root[a] * T.row(u);
      }
    }
    ws.llt_m.solveInPlace(Wm);
    T -= ws.C * Wm;
    return T;
  }

  RemlProblem p_;
  int grouping_ = -2;
  std::vector<char> inner_;
  std::vector<std::vector<Eigen::Index>> blocks_;
  std::vector<std::vector<std::vector<std::int32_t>>> blev_;  // [block][term][position]
};

// ---------------------------------------------------------------------------

class StrataEvaluator final : public RemlEvaluator {
 public:
  StrataEvaluator(const RemlProblem& p, FactorLattice lattice, std::vector<std::size_t> term_nodes)
      : p_(p), lattice_(std::move(lattice)), term_nodes_(std::move(term_nodes)) {
    const bool has_fixed = p_.fixed.role() != Role::Universal && p_.fixed.n_levels() > 1;
    const Decomposition dec(lattice_, has_fixed ? p_.fixed.name() : std::string());
    const auto& nodes = lattice_.random_nodes();
    const std::size_t G = nodes.size();
    const auto parts = dec.project(p_.y);
    const Eigen::VectorXd fx = dec.fixed_part(p_.y);
    fixed_stratum_ = dec.fixed_stratum();
    df_.resize(G);
    dres_.resize(G);
    sres_.resize(G);
    for (std::size_t g = 0; g < G; ++g) {
      df_[g] = nodes[g].df;
      double d = nodes[g].df;
      double s = dot2(parts[g], parts[g]);
      if (nodes[g].role == Role::Universal) {
        d -= 1.0;
        s = 0.0;
        top_ = g;
      }
      if (g == fixed_stratum_) {
        d -= dec.fixed_df();
        const Eigen::VectorXd res = parts[g] - fx;
        s = dot2(res, res);
      }
      dres_[g] = d;
      sres_[g] = s;
    }
    const auto n = static_cast<double>(p_.n());
    const Eigen::VectorXd xsum = p_.X.colwise().sum().transpose();
    a_top_ = xsum * xsum.transpose() / n;
    b_top_ = xsum * p_.y.mean();
    a_fix_ = Eigen::MatrixXd::Zero(p_.X.cols(), p_.X.cols());
    b_fix_ = Eigen::VectorXd::Zero(p_.X.cols());
    if (fixed_stratum_ != Decomposition::npos) {
      Eigen::MatrixXd fxX(p_.X.rows(), p_.X.cols());
      for (Eigen::Index c = 0; c < p_.X.cols(); ++c) fxX.col(c) = dec.fixed_part(p_.X.col(c));
      a_fix_ = p_.X.transpose() * fxX;
      b_fix_ = fxX.transpose() * p_.y;
    }
    repl_.resize(term_nodes_.size());
    for (std::size_t k = 0; k < term_nodes_.size(); ++k) repl_[k] = dec.replication(term_nodes_[k]);
  }

  std::string name() const override { return "strata"; }

  UnitEval evaluate(const Eigen::VectorXd& gamma, bool need_ai) const override {
    const auto& nodes = lattice_.random_nodes();
    const std::size_t G = nodes.size();
    const std::size_t K = term_nodes_.size();
    std::vector<double> xi(G, 1.0);
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t k = 0; k < K; ++k) {
        if (lattice_.finer_eq(term_nodes_[k], g)) xi[g] += repl_[k] * gamma[static_cast<Eigen::Index>(k)];
      }
    }
    UnitEval e;
    for (std::size_t g = 0; g < G; ++g) e.logdet_V1 += df_[g] * std::log(xi[g]);
    const double xi_top = xi[top_];
    const double xi_fix = fixed_stratum_ != Decomposition::npos ? xi[fixed_stratum_] : 1.0;
    invert_xvx(a_top_ / xi_top + a_fix_ / xi_fix, e);
    e.beta = e.H1 * (b_top_ / xi_top + b_fix_ / xi_fix);

    e.tr_PJ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
    e.q = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
    for (std::size_t g = 0; g < G; ++g) {
      e.r2 += sres_[g] / xi[g];
      e.tr_P += dres_[g] / xi[g];
      e.q_e += sres_[g] / (xi[g] * xi[g]);
    }
    for (std::size_t k = 0; k < K; ++k) {
      double tr = 0.0;
      double q = 0.0;
      for (std::size_t g = 0; g < G; ++g) {
        if (!lattice_.finer_eq(term_nodes_[k], g)) continue;
        tr += dres_[g] / xi[g];
        q += sres_[g] / (xi[g] * xi[g]);
      }
      e.tr_PJ[static_cast<Eigen::Index>(k)] = repl_[k] * tr;
      e.q[static_cast<Eigen::Index>(k)] = repl_[k] * q;
      Eigen::MatrixXd A = a_top_ / (xi_top * xi_top);
      if (fixed_stratum_ != Decomposition::npos && lattice_.finer_eq(term_nodes_[k], fixed_stratum_)) {
        A += a_fix_ / (xi_fix * xi_fix);
      }
      e.dvar_beta.push_back(repl_[k] * e.H1 * A * e.H1);
    }
    e.dvar_beta.push_back(e.H1 * (a_top_ / (xi_top * xi_top) + a_fix_ / (xi_fix * xi_fix)) * e.H1);

    if (need_ai) {
      e.AI = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K + 1), static_cast<Eigen::Index>(K + 1));
      for (std::size_t g = 0; g < G; ++g) {
        const double w = 0.5 * sres_[g] / (xi[g] * xi[g] * xi[g]);
        if (w == 0.0) continue;
        for (std::size_t a = 0; a <= K; ++a) {
          const bool in_a = a == K || lattice_.finer_eq(term_nodes_[a], g);
          if (!in_a) continue;
          const double ra = a == K ? 1.0 : repl_[a];
          for (std::size_t b = 0; b <= K; ++b) {
            const bool in_b = b == K || lattice_.finer_eq(term_nodes_[b], g);
            if (!in_b) continue;
            const double rb = b == K ? 1.0 : repl_[b];
            e.AI(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += w * ra * rb;
          }
        }
      }
      e.has_ai = true;
    }
    return e;
  }

  Eigen::MatrixXd expected_information(const Eigen::VectorXd& gamma) const override {
    const std::size_t G = lattice_.random_nodes().size();
    const std::size_t K = term_nodes_.size();
    std::vector<double> xi(G, 1.0);
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t k = 0; k < K; ++k) {
        if (lattice_.finer_eq(term_nodes_[k], g)) xi[g] += repl_[k] * gamma[static_cast<Eigen::Index>(k)];
      }
    }
    const auto Ki = static_cast<Eigen::Index>(K);
    Eigen::MatrixXd ei = Eigen::MatrixXd::Zero(Ki + 1, Ki + 1);
    for (std::size_t g = 0; g < G; ++g) {
      const double w = 0.5 * dres_[g] / (xi[g] * xi[g]);
      if (w == 0.0) continue;
      for (std::size_t a = 0; a <= K; ++a) {
        if (a < K && !lattice_.finer_eq(term_nodes_[a], g)) continue;
        const double ra = a == K ? 1.0 : repl_[a];
        for (std::size_t b = 0; b <= K; ++b) {
          if (b < K && !lattice_.finer_eq(term_nodes_[b], g)) continue;
          const double rb = b == K ? 1.0 : repl_[b];
          ei(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += w * ra * rb;
        }
      }
    }
    return ei;
  }

 private:
  RemlProblem p_;
  FactorLattice lattice_;
  std::vector<std::size_t> term_nodes_;
  std::vector<double> repl_;
  std::vector<double> df_, dres_, sres_;
  std::size_t fixed_stratum_ = Decomposition::npos;
  std::size_t top_ = 0;
  Eigen::MatrixXd a_top_, a_fix_;
  Eigen::VectorXd b_top_, b_fix_;
};

}  // namespace

std::unique_ptr<RemlEvaluator> make_dense_evaluator(const RemlProblem& problem) {
  return std::make_unique<DenseEvaluator>(problem);
}

std::unique_ptr<RemlEvaluator> make_block_evaluator(const RemlProblem& problem, int block_term) {
  return std::make_unique<BlockEvaluator>(problem, block_term);
}

std::unique_ptr<RemlEvaluator> make_strata_evaluator(const RemlProblem& problem) {
  check_problem(problem);
  const bool has_fixed = problem.fixed.n_units() == problem.n() && problem.fixed.n_levels() > 1;
  // X must span exactly the fixed factor's level space.
  const std::size_t expected_p = has_fixed ? static_cast<std::size_t>(problem.fixed.n_levels()) : 1;
  if (problem.p() != expected_p) return nullptr;
  try {
    std::vector<Factor> fixed;
    if (has_fixed) fixed.push_back(problem.fixed.with_role(Role::Fixed));
    FactorLattice lat = FactorLattice::build(fixed, problem.terms);
    std::vector<std::size_t> nodes;
    for (const auto& t : problem.terms) {
      std::optional<std::size_t> hit;
      for (std::size_t i = 0; i < lat.random_nodes().size(); ++i) {
        const auto& node = lat.random_nodes()[i];
        if (node.has_parameter() && node.factor.same_partition(t)) hit = i;
      }
      if (!hit) return nullptr;
      nodes.push_back(*hit);
    }
    if (lat.parameter_nodes().size() != nodes.size()) return nullptr;
    RemlProblem copy = problem;
    if (!has_fixed) copy.fixed = Factor::universal(problem.n());
    return std::make_unique<StrataEvaluator>(copy, std::move(lat), std::move(nodes));
  } catch (const StructuralError&) {
    return nullptr;
  }
}

double logdet_crossprod(const Eigen::MatrixXd& X) {
  Eigen::LLT<Eigen::MatrixXd> llt(X.transpose() * X);
  if (llt.info() != Eigen::Success) throw StructuralError("fixed-effect design is rank deficient");
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double restricted_loglik(const UnitEval& e, double s, std::size_t n, std::size_t p, double logdet_xtx) {
  const double dn = static_cast<double>(n);
  const double dp = static_cast<double>(p);
  return -0.5 * (e.logdet_V1 + dn * std::log(s) + e.logdet_XVX1 - dp * std::log(s) - logdet_xtx + e.r2 / s +
                 (dn - dp) * std::log(2.0 * std::numbers::pi));
}

double profiled_loglik(const UnitEval& e, std::size_t n, std::size_t p, double logdet_xtx) {
  const double s = e.r2 / static_cast<double>(n - p);
  return restricted_loglik(e, s, n, p, logdet_xtx);
}

Eigen::VectorXd theta_score(const UnitEval& e, double s) {
  const Eigen::Index K = e.tr_PJ.size();
  Eigen::VectorXd g(K + 1);
  for (Eigen::Index k = 0; k < K; ++k) g[k] = -0.5 * (e.tr_PJ[k] / s - e.q[k] / (s * s));
  g[K] = -0.5 * (e.tr_P / s - e.q_e / (s * s));
  return g;
}

Eigen::VectorXd profiled_gradient(const UnitEval& e, std::size_t n, std::size_t p) {
  const double s = e.r2 / static_cast<double>(n - p);
  return -0.5 * (e.tr_PJ - e.q / s);
}

Eigen::MatrixXd observed_information(const UnitEval& e, const Eigen::MatrixXd& ei, double s) {
  return (2.0 * e.AI / s - ei) / (s * s);
}

Eigen::MatrixXd profiled_information(const UnitEval& e, const Eigen::VectorXd& gamma, std::size_t n,
                                     std::size_t p) {
  const Eigen::Index K = gamma.size();
  const double s = e.r2 / static_cast<double>(n - p);
  const Eigen::MatrixXd ai = e.AI / (s * s * s);
  // θ_k = γ_k s, θ_e = s.
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(K + 1, K + 1);
  for (Eigen::Index k = 0; k < K; ++k) {
    J(k, k) = s;
    J(k, K) = gamma[k];
  }
  J(K, K) = 1.0;
  const Eigen::MatrixXd info = J.transpose() * ai * J;
  const Eigen::MatrixXd igg = info.topLeftCorner(K, K);
  const Eigen::VectorXd igs = info.topRightCorner(K, 1);
  const double iss = info(K, K);
  return igg - igs * igs.transpose() / iss;
}

}  // namespace txd
