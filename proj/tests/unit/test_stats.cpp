#include <doctest.h>

#include <random>
#include <vector>

#include "txd/stats.hpp"

using namespace txd;

TEST_CASE("distribution tails at tabulated critical values") {
  CHECK(f_upper_tail(4.543077165, 1, 15) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(t_two_sided(2.131449546, 15) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(t_two_sided(-2.131449546, 15) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(chisq_upper_tail(3.841458821, 1) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(chisq_upper_tail(1.0, 0) == 0.0);
  CHECK(t_two_sided(0.0, 7.3) == doctest::Approx(1.0));
}

TEST_CASE("Satterthwaite combination") {
  const MsTerm two[] = {{1.0, 2.0, 10.0}, {1.0, 2.0, 10.0}};
  CHECK(*satterthwaite_df(two) == doctest::Approx(20.0));
  const MsTerm neg[] = {{1.0, 1.0, 5.0}, {-1.0, 2.0, 5.0}};
  CHECK_FALSE(satterthwaite_df(neg).has_value());
}

TEST_CASE("running mean merge is order independent") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(3.0, 2.0);
  std::vector<double> xs(1001);
  for (auto& x : xs) x = d(rng);
  RunningMean all, a, b;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    all.add(xs[i]);
    (i < 400 ? a : b).add(xs[i]);
  }
  RunningMean ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  CHECK(ab.n == all.n);
  CHECK(ab.mean == doctest::Approx(all.mean).epsilon(1e-13));
  CHECK(ab.variance() == doctest::Approx(all.variance()).epsilon(1e-12));
  CHECK(ba.mean == doctest::Approx(ab.mean).epsilon(1e-13));
  CHECK(all.mc_se() == doctest::Approx(std::sqrt(all.variance() / 1001.0)));
  RunningMean empty;
  empty.merge(a);
  CHECK(empty.mean == a.mean);
}
