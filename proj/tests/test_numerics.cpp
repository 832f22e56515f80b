// Copyright 2026 The FedFisher Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedfisher/numerics.hpp"
#include "oracle/oracle.hpp"
#include "test_util.hpp"

namespace fedfisher {
namespace {

using testing::random_matrix;
using testing::random_psd;
using testing::random_symmetric;
using testing::random_vector;

TEST(DenseMatrix, RejectsWrongEntryCount) {
  EXPECT_THROW(DenseMatrix(2, 2, Vector{1, 2, 3}), std::invalid_argument);
  EXPECT_THROW((DenseMatrix{{1, 2}, {3}}), std::invalid_argument);
}

TEST(DenseMatrix, RowMajorLayout) {
  const DenseMatrix a{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(a(1, 0), 4.0);
  EXPECT_EQ(a.entries(), (Vector{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(transpose(a)(2, 1), 6.0);
  EXPECT_EQ(matvec(a, Vector{1, 1, 1}), (Vector{6, 15}));
}

TEST(PowerIteration, DiagonalOperator) {
  const auto est = power_iteration_max_eig(DenseMatrix{{3, 0}, {0, 1}}, 1e-12, 1000);
  EXPECT_TRUE(est.converged);
  EXPECT_NEAR(est.eigenvalue, 3.0, 1e-10);
  EXPECT_NEAR(norm2(est.eigenvector), 1.0, 1e-12);
}

TEST(PowerIteration, ZeroOperator) {
  const auto est = power_iteration_max_eig(DenseMatrix(3, 3), 1e-12, 100);
  EXPECT_EQ(est.eigenvalue, 0.0);
}

TEST(PowerIteration, TwoByTwoCharacteristicPolynomial) {
  // roots of (2 - t)^2 - 1 are 1 and 3
  const auto est = power_iteration_max_eig(DenseMatrix{{2, 1}, {1, 2}}, 1e-12, 1000);
  EXPECT_NEAR(est.eigenvalue, 3.0, 1e-10);
}

TEST(PowerIteration, StartVectorOrthogonalToTopEigenvector) {
  // the all-ones start has no component along (1, -1)
  const auto est = power_iteration_max_eig(DenseMatrix{{1, -1}, {-1, 1}}, 1e-12, 1000);
  EXPECT_NEAR(est.eigenvalue, 2.0, 1e-9);
}

TEST(PowerIteration, MatchesDenseOracleAndIsMaximal) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + trial;
    const DenseMatrix a = random_psd(rng, n, 3 + trial % 5);
    const double tol = 1e-9;
    const auto est = power_iteration_max_eig(a, tol, 100000);
    const double truth = oracle::max_eigenvalue(a);
    EXPECT_LE(std::abs(est.eigenvalue - truth), tol * (est.eigenvalue + 1.0) * 10) << "trial " << trial;
    for (int k = 0; k < 10; ++k) {
      const Vector v = random_vector(rng, n);
      EXPECT_GE(est.eigenvalue, dot(v, matvec(a, v)) / dot(v, v) - 1e-8);
    }
  }
}

TEST(PowerIteration, ReportsNonConvergence) {
  std::mt19937_64 rng(3);
  const DenseMatrix a = random_psd(rng, 30, 30);
  const auto est = power_iteration_max_eig(a, 1e-15, 2);
  EXPECT_FALSE(est.converged);
  EXPECT_NEAR(norm2(est.eigenvector), 1.0, 1e-12);
}

TEST(SymmetricEigen, AgreesWithEigenSolver) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 2u, 3u, 8u, 40u}) {
    const DenseMatrix a = random_symmetric(rng, n);
    const SymmetricEigen es = symmetric_eigen(a);
    Eigen::SelfAdjointEigenSolver<oracle::Mat> ref(oracle::to_eigen(a));
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_NEAR(es.values[k], ref.eigenvalues()[static_cast<Eigen::Index>(n - 1 - k)], 1e-10);
      if (k > 0) {
        EXPECT_GE(es.values[k - 1], es.values[k]);
      }
    }
    // A V = V diag(values)
    const DenseMatrix av = matmul(a, es.vectors);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(av(i, k), es.vectors(i, k) * es.values[k], 1e-9);
  }
}

TEST(TopKSvd, RankOneExact) {
  const Vector u{1, 2, 3}, v{-1, 0.5, 2};
  const DenseMatrix a = outer(u, v);
  const LowRankFactors f = top_k_svd(a, 1);
  EXPECT_NEAR(frobenius_norm(f.reconstruct() - a), 0.0, 1e-12);
}

TEST(TopKSvd, IdentityRankOneLeavesUnitError) {
  const LowRankFactors f = top_k_svd(DenseMatrix::identity(2), 1);
  EXPECT_NEAR(frobenius_norm(f.reconstruct() - DenseMatrix::identity(2)), 1.0, 1e-12);
}

TEST(TopKSvd, DiagonalReadOff) {
  const DenseMatrix a = DenseMatrix::diagonal(Vector{5, 3, 1});
  const LowRankFactors f = top_k_svd(a, 2);
  ASSERT_EQ(f.sigma.size(), 2u);
  EXPECT_NEAR(f.sigma[0], 5.0, 1e-12);
  EXPECT_NEAR(f.sigma[1], 3.0, 1e-12);
  EXPECT_NEAR(frobenius_norm(f.reconstruct() - a), 1.0, 1e-12);
}

TEST(TopKSvd, ZeroRankAndOversizedRank) {
  const DenseMatrix a = DenseMatrix::identity(3);
  const LowRankFactors f = top_k_svd(a, 0);
  EXPECT_EQ(f.rank(), 0u);
  EXPECT_EQ(frobenius_norm(f.reconstruct()), 0.0);
  EXPECT_THROW(top_k_svd(a, 4), std::invalid_argument);
}

TEST(TopKSvd, BestApproximationAgainstJacobiSvd) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t r = 4 + trial, c = 3 + (trial * 7) % 9;
    const DenseMatrix a = random_matrix(rng, r, c);
    Eigen::JacobiSVD<oracle::Mat> ref(oracle::to_eigen(a));
    const std::size_t kmax = std::min(r, c);
    for (std::size_t k = 1; k <= kmax; ++k) {
      const LowRankFactors f = top_k_svd(a, k);
      double dropped = 0.0;
      for (std::size_t j = k; j < kmax; ++j) dropped += std::pow(ref.singularValues()[static_cast<Eigen::Index>(j)], 2);
      EXPECT_NEAR(frobenius_norm(f.reconstruct() - a), std::sqrt(dropped), 1e-8 * (1.0 + frobenius_norm(a)));
      for (std::size_t j = 0; j < k; ++j) {
        EXPECT_NEAR(norm2(f.u.column(j)), 1.0, 1e-8);
        EXPECT_NEAR(norm2(f.v.column(j)), 1.0, 1e-8);
        if (j > 0) {
          EXPECT_GE(f.sigma[j - 1], f.sigma[j]);
        }
      }
    }
    const LowRankFactors full = top_k_svd(a, kmax);
    EXPECT_LE(frobenius_norm(full.reconstruct() - a), 1e-6 * frobenius_norm(a));
  }
}

TEST(TopKSvd, RankDeficientInputKeepsOrthonormalFactors) {
  const DenseMatrix a = outer(Vector{1, 1, 0}, Vector{0, 1, 1});
  const LowRankFactors f = top_k_svd(a, 3);
  EXPECT_NEAR(frobenius_norm(f.reconstruct() - a), 0.0, 1e-12);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(norm2(f.u.column(j)), 1.0, 1e-8);
}

TEST(KronMatvec, IdentityFactors) {
  const Vector x{1, -2, 3, 4, 5, 6};
  EXPECT_EQ(kron_matvec(DenseMatrix::identity(3), DenseMatrix::identity(2), x), x);
}

TEST(KronMatvec, HandExample) {
  const DenseMatrix a{{1, 2}, {3, 4}}, b{{0, 1}, {1, 0}};
  const Vector y = kron_matvec(a, b, Vector{1, 0, 0, 1});
  EXPECT_EQ(y, (Vector{2, 1, 4, 3}));
}

TEST(KronMatvec, ZeroFactor) {
  const Vector y = kron_matvec(DenseMatrix(2, 2), DenseMatrix::identity(3), Vector(6, 1.0));
  EXPECT_EQ(y, Vector(6, 0.0));
}

TEST(KronMatvec, DenseEquivalence) {
  std::mt19937_64 rng(21);
  for (std::size_t p = 1; p <= 6; ++p) {
    for (std::size_t q = 1; q <= 6; ++q) {
      const DenseMatrix a = random_matrix(rng, p, p), b = random_matrix(rng, q, q);
      const Vector x = random_vector(rng, p * q);
      // dense Kronecker product built from its definition
      oracle::Mat k(static_cast<Eigen::Index>(p * q), static_cast<Eigen::Index>(p * q));
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
          for (std::size_t r = 0; r < q; ++r)
            for (std::size_t s = 0; s < q; ++s)
              k(static_cast<Eigen::Index>(i * q + r), static_cast<Eigen::Index>(j * q + s)) = a(i, j) * b(r, s);
      const Vector want = oracle::to_vector(k * oracle::to_eigen(x));
      EXPECT_LE(testing::rel_error(kron_matvec(a, b, x), want), 1e-10);
      EXPECT_LE(testing::rel_error(matvec(kron(a, b), x), want), 1e-10);
    }
  }
}

TEST(KronMatvec, RejectsLengthMismatch) {
  EXPECT_THROW(kron_matvec(DenseMatrix::identity(2), DenseMatrix::identity(2), Vector(3)), std::invalid_argument);
  EXPECT_THROW(kron_matvec(DenseMatrix(2, 3), DenseMatrix::identity(2), Vector(6)), std::invalid_argument);
}

}  // namespace
}  // namespace fedfisher
