#include "cgan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cgan {

CheckReport finite_diff_check(const ScalarBuilder& fn, const Tensor& x, double epsilon,
                              double tolerance, double floor) {
  Record rec;
  const ValueId in = rec.input(x);
  const ValueId out = fn(rec, in);
  if (rec.value(out).size() != 1) {
    throw ShapeError("finite_diff_check: function must return a scalar, got shape " +
                     to_string(rec.value(out).shape()));
  }
  const Tensor analytic = rec.backward(out, Tensor(rec.value(out).shape(), {1.0})).front();

  CheckReport report;
  report.tolerance = tolerance;
  report.elements.resize(x.size());
  bool all_finite = true;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + epsilon;
    rec.set_input(in, probe);
    rec.replay();
    const double plus = rec.value(out)[0];
    probe[i] = original - epsilon;
    rec.set_input(in, probe);
    rec.replay();
    const double minus = rec.value(out)[0];
    probe[i] = original;

    ElementCheck& e = report.elements[i];
    e.analytic = analytic[i];
    e.finite = std::isfinite(plus) && std::isfinite(minus) && std::isfinite(e.analytic);
    if (!e.finite) {
      all_finite = false;
      e.numeric = std::isfinite(plus) && std::isfinite(minus) ? (plus - minus) / (2.0 * epsilon)
                                                              : std::nan("");
      e.rel_error = std::numeric_limits<double>::infinity();
      continue;
    }
    e.numeric = (plus - minus) / (2.0 * epsilon);
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
    e.rel_error = std::abs(e.analytic - e.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
  }
  if (!all_finite) report.max_rel_error = std::numeric_limits<double>::infinity();
  report.passed = all_finite && report.max_rel_error <= tolerance;
  return report;
}

}  // namespace cgan
