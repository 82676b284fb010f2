#include <doctest.h>

#include <mmgfm/rng.hpp>

#include <cmath>
#include <vector>

using namespace mmgfm;

TEST_CASE("same seed and stream reproduce the sequence") {
  Rng a(42, 7), b(42, 7);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u32() == b.next_u32());
}

TEST_CASE("different streams decorrelate") {
  Rng a(42, 0), b(42, 1);
  int equal = 0;
  for (int i = 0; i < 64; ++i) equal += (a.next_u32() == b.next_u32());
  CHECK(equal == 0);
}

TEST_CASE("uniform lies in [0,1) with correct first moments") {
  Rng r(1);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.03));
}

TEST_CASE("normal moments") {
  Rng r(2);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0, sum4 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sum2 += z * z;
    sum4 += z * z * z * z;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1.0).scale(0.02));
  CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));
  CHECK(sum4 / n == doctest::Approx(3.0).epsilon(0.06));
}

TEST_CASE("poisson moments in both regimes") {
  for (double mu : {0.5, 4.0, 25.0, 400.0}) {
    Rng r(3);
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = r.poisson(mu);
      sum += x;
      sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(mean == doctest::Approx(mu).epsilon(0.03));
    CHECK(var == doctest::Approx(mu).epsilon(0.06));
  }
  Rng r(4);
  CHECK(r.poisson(0.0) == 0.0);
}

TEST_CASE("bernoulli mean") {
  Rng r(5);
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += r.binomial(1.0, 0.3);
  CHECK(sum / n == doctest::Approx(0.3).epsilon(0.03));
  Rng r2(6);
  double s2 = 0.0;
  for (int i = 0; i < n; ++i) s2 += r2.binomial(7.0, 0.5);
  CHECK(s2 / n == doctest::Approx(3.5).epsilon(0.02));
}
