#include "mmx/gradcheck.hpp"

#include <cmath>

namespace mmx {

namespace {

double eval(const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& builder,
            const std::vector<Tensor>& points) {
  Tape tape;
  std::vector<Tape::Var> vars;
  vars.reserve(points.size());
  for (const Tensor& p : points) vars.push_back(tape.input(p));
  Tape::Var out = builder(tape, vars);
  const Tensor& v = tape.val(out);
  if (v.numel() != 1) throw Error("finite_diff_check: builder output is not scalar");
  return v[0];
}

}  // namespace

GradCheckReport finite_diff_check(
    const std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>& builder,
    const std::vector<Tensor>& points, double h, double tol) {
  if (h <= 0) throw Error("finite_diff_check: h must be positive");

  // analytic side, one reverse pass
  Tape tape;
  std::vector<Tape::Var> vars;
  for (const Tensor& p : points) vars.push_back(tape.input(p));
  Tape::Var out = builder(tape, vars);
  if (tape.val(out).numel() != 1)
    throw Error("finite_diff_check: builder output is not scalar");
  tape.backward(out);
  std::vector<Tensor> analytic;
  for (Tape::Var v : vars) analytic.push_back(tape.grad(v));

  GradCheckReport rep;
  std::vector<Tensor> work = points;
  for (size_t t = 0; t < points.size(); ++t) {
    for (int i = 0; i < points[t].numel(); ++i) {
      double orig = work[t][i];
      work[t][i] = orig + h;
      double fp = eval(builder, work);
      work[t][i] = orig - h;
      double fm = eval(builder, work);
      work[t][i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[t][i];
      double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(t);
        rep.worst_index = i;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace mmx
