// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Small statistics helpers for the test suites: Kolmogorov-Smirnov and
// chi-square p-values. Test-only code.

#ifndef ATSS_TESTS_STATS_HPP_
#define ATSS_TESTS_STATS_HPP_

#include <vector>

namespace atss::testing {

// Two-sided KS p-value of `samples` against Uniform[lo, hi].
double ks_uniform_pvalue(std::vector<double> samples, double lo, double hi);

// Upper-tail p-value of a chi-square statistic with `dof` degrees of freedom.
double chi2_pvalue(double stat, int dof);

}  // namespace atss::testing

#endif  // ATSS_TESTS_STATS_HPP_
