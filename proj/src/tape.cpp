#include "mi2m/tape.hpp"

#include <cmath>

namespace mi2m::ad {

const Mat& Var::value() const { return tape->node(id).value; }

Var Tape::leaf(Mat value, bool requires_grad) {
  return {this, emplace(std::move(value), requires_grad, nullptr)};
}

int Tape::emplace(Mat value, bool requires_grad, std::function<void(Tape&, int)> bw) {
  nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(bw)});
  return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ValidationError("backward: var from another tape");
  const Node& ln = nodes_[loss.id];
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw ValidationError("backward: loss must be a 1x1 scalar");
  grad_buf(loss.id)(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

Mat Tape::grad_of(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace {

bool needs(Var a) { return a.tape->node(a.id).requires_grad; }

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ValidationError("op: vars from different tapes");
  return *a.tape;
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(op) + ": shape mismatch (" +
                          std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
}

// Unary elementwise helper: f(value) forward, df(parent_value, self_value)
// times grad backward.
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape;
  Mat y = f(a.value());
  bool rg = needs(a);
  int pid = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([pid, df](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       tp.grad_buf(pid) += df(tp.node(pid).value, tp.node(self).value, g);
                     })
                        : nullptr);
  return {&t, id};
}

Mat stable_softmax_rows(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  return y;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows())
    throw ValidationError("matmul: inner dimensions differ (" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + ")");
  Mat y = a.value() * b.value();
  bool rg = needs(a) || needs(b);
  int ai = a.id, bi = b.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai, bi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad)
                         tp.grad_buf(ai).noalias() += g * tp.node(bi).value.transpose();
                       if (tp.node(bi).requires_grad)
                         tp.grad_buf(bi).noalias() += tp.node(ai).value.transpose() * g;
                     })
                        : nullptr);
  return {&t, id};
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(a.value().transpose(), rg,
                     rg ? std::function<void(Tape&, int)>([ai](Tape& tp, int self) {
                       tp.grad_buf(ai) += tp.node(self).grad.transpose();
                     })
                        : nullptr);
  return {&t, id};
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "add");
  bool rg = needs(a) || needs(b);
  int ai = a.id, bi = b.id;
  int id = t.emplace(a.value() + b.value(), rg,
                     rg ? std::function<void(Tape&, int)>([ai, bi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad) tp.grad_buf(ai) += g;
                       if (tp.node(bi).requires_grad) tp.grad_buf(bi) += g;
                     })
                        : nullptr);
  return {&t, id};
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "sub");
  bool rg = needs(a) || needs(b);
  int ai = a.id, bi = b.id;
  int id = t.emplace(a.value() - b.value(), rg,
                     rg ? std::function<void(Tape&, int)>([ai, bi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad) tp.grad_buf(ai) += g;
                       if (tp.node(bi).requires_grad) tp.grad_buf(bi) -= g;
                     })
                        : nullptr);
  return {&t, id};
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "mul");
  bool rg = needs(a) || needs(b);
  int ai = a.id, bi = b.id;
  int id = t.emplace(a.value().cwiseProduct(b.value()), rg,
                     rg ? std::function<void(Tape&, int)>([ai, bi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad)
                         tp.grad_buf(ai) += g.cwiseProduct(tp.node(bi).value);
                       if (tp.node(bi).requires_grad)
                         tp.grad_buf(bi) += g.cwiseProduct(tp.node(ai).value);
                     })
                        : nullptr);
  return {&t, id};
}

Var affine(Var a, double scale, double shift) {
  return unary(
      a, [scale, shift](const Mat& x) -> Mat { return (x.array() * scale + shift).matrix(); },
      [scale](const Mat&, const Mat&, const Mat& g) -> Mat { return g * scale; });
}

Var add_rowvec(Var a, Var v) {
  Tape& t = same_tape(a, v);
  if (v.rows() != 1 || v.cols() != a.cols())
    throw ValidationError("add_rowvec: expected 1x" + std::to_string(a.cols()));
  Mat y = a.value().rowwise() + Eigen::RowVectorXd(v.value().row(0));
  bool rg = needs(a) || needs(v);
  int ai = a.id, vi = v.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai, vi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad) tp.grad_buf(ai) += g;
                       if (tp.node(vi).requires_grad)
                         tp.grad_buf(vi) += g.colwise().sum();
                     })
                        : nullptr);
  return {&t, id};
}

Var add_colvec(Var a, Var v) {
  Tape& t = same_tape(a, v);
  if (v.cols() != 1 || v.rows() != a.rows())
    throw ValidationError("add_colvec: expected " + std::to_string(a.rows()) + "x1");
  Mat y = a.value().colwise() + Eigen::VectorXd(v.value().col(0));
  bool rg = needs(a) || needs(v);
  int ai = a.id, vi = v.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai, vi](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       if (tp.node(ai).requires_grad) tp.grad_buf(ai) += g;
                       if (tp.node(vi).requires_grad)
                         tp.grad_buf(vi) += g.rowwise().sum();
                     })
                        : nullptr);
  return {&t, id};
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](const Mat& x) -> Mat {
        return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      },
      [](const Mat&, const Mat& y, const Mat& g) -> Mat {
        return g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
      });
}

Var tanh_(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().tanh().matrix(); },
      [](const Mat&, const Mat& y, const Mat& g) -> Mat {
        return g.cwiseProduct((1.0 - y.array().square()).matrix());
      });
}

Var relu(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.cwiseMax(0.0); },
      [](const Mat& x, const Mat&, const Mat& g) -> Mat {
        return g.cwiseProduct((x.array() > 0.0).cast<double>().matrix());
      });
}

Var gelu(Var a) {
  return unary(
      a,
      [](const Mat& x) -> Mat {
        return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
      },
      [](const Mat& x, const Mat&, const Mat& g) -> Mat {
        Mat d = x.unaryExpr([](double v) {
          double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
          return cdf + v * pdf;
        });
        return g.cwiseProduct(d);
      });
}

Var exp_(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().exp().matrix(); },
      [](const Mat&, const Mat& y, const Mat& g) -> Mat { return g.cwiseProduct(y); });
}

Var log_(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().log().matrix(); },
      [](const Mat& x, const Mat&, const Mat& g) -> Mat {
        return g.cwiseQuotient(x);
      });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  Mat y = stable_softmax_rows(a.value());
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai](Tape& tp, int self) {
                       const Mat& y = tp.node(self).value;
                       const Mat& g = tp.node(self).grad;
                       Mat& da = tp.grad_buf(ai);
                       for (Eigen::Index r = 0; r < y.rows(); ++r) {
                         double dot = g.row(r).dot(y.row(r));
                         da.row(r) += (y.row(r).array() * (g.row(r).array() - dot)).matrix();
                       }
                     })
                        : nullptr);
  return {&t, id};
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const Eigen::Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ValidationError("layer_norm_rows: gain/bias must be 1x" + std::to_string(d));
  const Mat& v = x.value();
  Mat y(v.rows(), d);
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double mu = v.row(r).mean();
    double var = (v.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    y.row(r) = (((v.row(r).array() - mu) * inv) * gain.value().row(0).array() +
                bias.value().row(0).array())
                   .matrix();
  }
  bool rg = needs(x) || needs(gain) || needs(bias);
  int xi = x.id, gi = gain.id, bi = bias.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([xi, gi, bi, eps](Tape& tp, int self) {
                       const Mat& v = tp.node(xi).value;
                       const Mat& g = tp.node(self).grad;
                       const Eigen::RowVectorXd gn = tp.node(gi).value.row(0);
                       const Eigen::Index d = v.cols();
                       for (Eigen::Index r = 0; r < v.rows(); ++r) {
                         double mu = v.row(r).mean();
                         double var = (v.row(r).array() - mu).square().mean();
                         double inv = 1.0 / std::sqrt(var + eps);
                         Eigen::RowVectorXd xhat = ((v.row(r).array() - mu) * inv).matrix();
                         if (tp.node(gi).requires_grad)
                           tp.grad_buf(gi) += g.row(r).cwiseProduct(xhat);
                         if (tp.node(bi).requires_grad) tp.grad_buf(bi) += g.row(r);
                         if (tp.node(xi).requires_grad) {
                           Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gn);
                           double m1 = dxhat.mean();
                           double m2 = dxhat.cwiseProduct(xhat).mean();
                           tp.grad_buf(xi).row(r) +=
                               ((dxhat.array() - m1 - xhat.array() * m2) * inv).matrix();
                         }
                         (void)d;
                       }
                     })
                        : nullptr);
  return {&t, id};
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index total = 0, cols = parts[0].cols();
  bool rg = false;
  for (Var p : parts) {
    if (p.tape != &t) throw ValidationError("concat_rows: mixed tapes");
    if (p.cols() != cols) throw ValidationError("concat_rows: column mismatch");
    total += p.rows();
    rg = rg || needs(p);
  }
  Mat y(total, cols);
  std::vector<std::pair<int, int>> spans;  // (id, row offset)
  Eigen::Index at = 0;
  for (Var p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id, static_cast<int>(at));
    at += p.rows();
  }
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([spans](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       for (auto [pid, off] : spans) {
                         auto& pn = tp.node(pid);
                         if (!pn.requires_grad) continue;
                         tp.grad_buf(pid) += g.middleRows(off, pn.value.rows());
                       }
                     })
                        : nullptr);
  return {&t, id};
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: empty");
  Tape& t = *parts[0].tape;
  Eigen::Index total = 0, rows = parts[0].rows();
  bool rg = false;
  for (Var p : parts) {
    if (p.tape != &t) throw ValidationError("concat_cols: mixed tapes");
    if (p.rows() != rows) throw ValidationError("concat_cols: row mismatch");
    total += p.cols();
    rg = rg || needs(p);
  }
  Mat y(rows, total);
  std::vector<std::pair<int, int>> spans;
  Eigen::Index at = 0;
  for (Var p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id, static_cast<int>(at));
    at += p.cols();
  }
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([spans](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       for (auto [pid, off] : spans) {
                         auto& pn = tp.node(pid);
                         if (!pn.requires_grad) continue;
                         tp.grad_buf(pid) += g.middleCols(off, pn.value.cols());
                       }
                     })
                        : nullptr);
  return {&t, id};
}

Var slice_rows(Var a, int r0, int n) {
  Tape& t = *a.tape;
  if (r0 < 0 || n < 0 || r0 + n > a.rows()) throw ValidationError("slice_rows: out of range");
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(a.value().middleRows(r0, n), rg,
                     rg ? std::function<void(Tape&, int)>([ai, r0, n](Tape& tp, int self) {
                       tp.grad_buf(ai).middleRows(r0, n) += tp.node(self).grad;
                     })
                        : nullptr);
  return {&t, id};
}

Var slice_cols(Var a, int c0, int n) {
  Tape& t = *a.tape;
  if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw ValidationError("slice_cols: out of range");
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(a.value().middleCols(c0, n), rg,
                     rg ? std::function<void(Tape&, int)>([ai, c0, n](Tape& tp, int self) {
                       tp.grad_buf(ai).middleCols(c0, n) += tp.node(self).grad;
                     })
                        : nullptr);
  return {&t, id};
}

Var gather_rows(Var a, std::vector<int> idx) {
  Tape& t = *a.tape;
  Mat y(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw ValidationError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>(
                              [ai, idx = std::move(idx)](Tape& tp, int self) {
                                const Mat& g = tp.node(self).grad;
                                Mat& da = tp.grad_buf(ai);
                                for (size_t i = 0; i < idx.size(); ++i)
                                  da.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                              })
                        : nullptr);
  return {&t, id};
}

Var mask_rows(Var x, std::vector<int> idx, Var row) {
  Tape& t = same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols())
    throw ValidationError("mask_rows: replacement must be 1x" + std::to_string(x.cols()));
  Mat y = x.value();
  for (int i : idx) {
    if (i < 0 || i >= y.rows()) throw ValidationError("mask_rows: index out of range");
    y.row(i) = row.value().row(0);
  }
  bool rg = needs(x) || needs(row);
  int xi = x.id, ri = row.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>(
                              [xi, ri, idx = std::move(idx)](Tape& tp, int self) {
                                const Mat& g = tp.node(self).grad;
                                if (tp.node(xi).requires_grad) {
                                  Mat gm = g;
                                  for (int i : idx) gm.row(i).setZero();
                                  tp.grad_buf(xi) += gm;
                                }
                                if (tp.node(ri).requires_grad) {
                                  Mat& dr = tp.grad_buf(ri);
                                  for (int i : idx) dr += g.row(i);
                                }
                              })
                        : nullptr);
  return {&t, id};
}

Var reshape(Var a, int rows, int cols) {
  Tape& t = *a.tape;
  if (static_cast<Eigen::Index>(rows) * cols != a.rows() * a.cols())
    throw ValidationError("reshape: element count mismatch");
  Mat y = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       const auto& av = tp.node(ai).value;
                       tp.grad_buf(ai) +=
                           Eigen::Map<const Mat>(g.data(), av.rows(), av.cols());
                     })
                        : nullptr);
  return {&t, id};
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Mat y(1, 1);
  y(0, 0) = a.value().sum();
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai](Tape& tp, int self) {
                       double g = tp.node(self).grad(0, 0);
                       tp.grad_buf(ai).array() += g;
                     })
                        : nullptr);
  return {&t, id};
}

Var mean_all(Var a) {
  double n = static_cast<double>(a.rows() * a.cols());
  return affine(sum_all(a), 1.0 / n, 0.0);
}

Var mean_rows(Var a) {
  Tape& t = *a.tape;
  Mat y = a.value().colwise().mean();
  bool rg = needs(a);
  int ai = a.id;
  double inv = 1.0 / static_cast<double>(a.rows());
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai, inv](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       Mat& da = tp.grad_buf(ai);
                       da += (g * inv).colwise().replicate(da.rows());
                     })
                        : nullptr);
  return {&t, id};
}

Var nll_rows(Var logits, std::vector<int> targets) {
  Tape& t = *logits.tape;
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw ValidationError("nll_rows: one target per row required");
  const Mat& x = logits.value();
  for (size_t i = 0; i < targets.size(); ++i)
    if (targets[i] < 0 || targets[i] >= x.cols())
      throw ValidationError("nll_rows: target " + std::to_string(targets[i]) +
                            " outside [0, " + std::to_string(x.cols()) + ")");
  double sum = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double m = x.row(r).maxCoeff();
    double lse = m + std::log((x.row(r).array() - m).exp().sum());
    sum += lse - x(r, targets[static_cast<size_t>(r)]);
  }
  Mat y(1, 1);
  y(0, 0) = sum;
  bool rg = needs(logits);
  int li = logits.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>(
                              [li, targets = std::move(targets)](Tape& tp, int self) {
                                double g = tp.node(self).grad(0, 0);
                                const Mat& x = tp.node(li).value;
                                Mat& dx = tp.grad_buf(li);
                                for (Eigen::Index r = 0; r < x.rows(); ++r) {
                                  double m = x.row(r).maxCoeff();
                                  Eigen::ArrayXd e = (x.row(r).array() - m).exp();
                                  Eigen::ArrayXd p = e / e.sum();
                                  dx.row(r) += (g * p).matrix().transpose();
                                  dx(r, targets[static_cast<size_t>(r)]) -= g;
                                }
                              })
                        : nullptr);
  return {&t, id};
}

Var gumbel_softmax_rows(Var logits, const Mat& noise, double tau, bool hard) {
  Tape& t = *logits.tape;
  if (tau <= 0.0) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  if (!logits.value().allFinite()) throw NumericError("gumbel_softmax: non-finite logits");
  if (noise.rows() != logits.rows() || noise.cols() != logits.cols())
    throw ValidationError("gumbel_softmax: noise shape mismatch");
  Mat u = (logits.value() + noise) / tau;
  Mat soft = stable_softmax_rows(u);
  Mat out;
  if (hard) {
    out = Mat::Zero(soft.rows(), soft.cols());
    for (Eigen::Index r = 0; r < soft.rows(); ++r) {
      Eigen::Index arg = 0;
      soft.row(r).maxCoeff(&arg);
      out(r, arg) = 1.0;
    }
  } else {
    out = soft;
  }
  bool rg = needs(logits);
  int li = logits.id;
  int id = t.emplace(std::move(out), rg,
                     rg ? std::function<void(Tape&, int)>(
                              [li, tau, soft = std::move(soft)](Tape& tp, int self) {
                                const Mat& g = tp.node(self).grad;
                                Mat& dl = tp.grad_buf(li);
                                for (Eigen::Index r = 0; r < soft.rows(); ++r) {
                                  double dot = g.row(r).dot(soft.row(r));
                                  dl.row(r) += (soft.row(r).array() *
                                                (g.row(r).array() - dot) / tau)
                                                   .matrix();
                                }
                              })
                        : nullptr);
  return {&t, id};
}

Var gather_flat(Var a, const IndexMap& map) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  const int64_t limit = static_cast<int64_t>(x.size());
  Mat y(map.rows, map.cols);
  for (int c = 0; c < map.cols; ++c)
    for (int r = 0; r < map.rows; ++r) {
      int64_t k = map.at(r, c);
      if (k >= limit) throw ValidationError("gather_flat: index out of range");
      y(r, c) = k < 0 ? 0.0 : x.data()[k];
    }
  bool rg = needs(a);
  int ai = a.id;
  int id = t.emplace(std::move(y), rg,
                     rg ? std::function<void(Tape&, int)>([ai, map](Tape& tp, int self) {
                       const Mat& g = tp.node(self).grad;
                       Mat& da = tp.grad_buf(ai);
                       double* d = da.data();
                       for (int c = 0; c < map.cols; ++c)
                         for (int r = 0; r < map.rows; ++r) {
                           int64_t k = map.at(r, c);
                           if (k >= 0) d[k] += g(r, c);
                         }
                     })
                        : nullptr);
  return {&t, id};
}

}  // namespace mi2m::ad
