#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"
#include "vpr/retrieval.hpp"

using namespace vpr;
using namespace vpr::retrieval;

namespace {

io::RowMeta geo(const std::string& id, double e, double n) {
  io::RowMeta m;
  m.image_id = id;
  m.east = e;
  m.north = n;
  return m;
}

io::RowMeta frame(const std::string& id, std::int64_t f) {
  io::RowMeta m;
  m.image_id = id;
  m.frame = f;
  return m;
}

std::vector<io::RowMeta> ids(std::size_t n) {
  std::vector<io::RowMeta> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(geo("r" + std::to_string(i), 100.0 * i, 0.0));
  return out;
}

std::vector<Hit> rows(std::initializer_list<std::size_t> r) {
  std::vector<Hit> out;
  for (auto i : r) out.push_back({i, 0.0});
  return out;
}

}  // namespace

TEST(DescriptorDb, BuildsFromUnitRows) {
  std::vector<Descriptor> d{Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({0.6, 0.8})};
  auto db = DescriptorDb::build(d, ids(3));
  EXPECT_EQ(db.size(), 3u);
  EXPECT_EQ(db.dim(), 2u);
  EXPECT_EQ(db.meta(2).image_id, "r2");
}

TEST(DescriptorDb, NonUnitRowRenormalised) {
  std::vector<Descriptor> d{Tensor::vector({3, 4}), Tensor::vector({0, 1})};
  auto db = DescriptorDb::build(d, ids(2));
  EXPECT_FLOAT_EQ(db.row(0)[0], 0.6f);
  EXPECT_FLOAT_EQ(db.row(0)[1], 0.8f);
}

TEST(DescriptorDb, RejectsBadInput) {
  std::vector<Descriptor> none;
  EXPECT_THROW(DescriptorDb::build(none, {}), Error);
  std::vector<Descriptor> mixed{Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})};
  EXPECT_THROW(DescriptorDb::build(mixed, ids(2)), Error);
  std::vector<Descriptor> zero{Tensor::vector({0, 0})};
  EXPECT_THROW(DescriptorDb::build(zero, ids(1)), Error);
  std::vector<Descriptor> one{Tensor::vector({1, 0})};
  EXPECT_THROW(DescriptorDb::build(one, ids(2)), Error);
  EXPECT_THROW(DescriptorDb::from_table({}), Error);
}

TEST(Search, SelfMatchRanksFirst) {
  auto f = vpr::testing::retrieval_fixture(3);
  auto db = DescriptorDb::build(f.db, f.db_meta);
  auto hits = search(db, f.db[17].span(), 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].row, 17u);
  EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
}

TEST(Search, TwoAxisExample) {
  std::vector<Descriptor> d{Tensor::vector({1, 0}), Tensor::vector({0, 1})};
  auto db = DescriptorDb::build(d, ids(2));
  auto hits = search(db, std::vector<double>{1, 0}, 2);
  EXPECT_EQ(hits, (std::vector<Hit>{{0, 1.0}, {1, 0.0}}));
}

TEST(Search, TiesGoToLowerRow) {
  std::vector<Descriptor> d{Tensor::vector({0, 1}), Tensor::vector({1, 0}), Tensor::vector({1, 0})};
  auto db = DescriptorDb::build(d, ids(3));
  auto hits = search(db, std::vector<double>{1, 0}, 3);
  EXPECT_EQ(hits[0].row, 1u);
  EXPECT_EQ(hits[1].row, 2u);
  EXPECT_EQ(hits[2].row, 0u);
}

TEST(Search, MatchesExhaustiveScanAndIgnoresThreads) {
  std::mt19937_64 rng(8);
  std::vector<Descriptor> d;
  for (int i = 0; i < 50; ++i) {
    auto t = Tensor::randn({16}, rng);
    l2_normalize(t.span());
    d.push_back(t);
  }
  auto db = DescriptorDb::build(d, ids(50));
  for (int q = 0; q < 5; ++q) {
    auto query = Tensor::randn({16}, rng);
    l2_normalize(query.span());
    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t r = 0; r < 50; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) s += static_cast<double>(static_cast<float>(d[r][j])) * query[j];
      oracle.emplace_back(-s, r);
    }
    std::sort(oracle.begin(), oracle.end());
    auto hits = search(db, query.span(), 50);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(hits[i].row, oracle[i].second);
    for (int threads : {2, 3, 7}) EXPECT_EQ(search(db, query.span(), 10, threads), search(db, query.span(), 10, 1));
  }
}

TEST(Search, RejectsBadQueries) {
  std::vector<Descriptor> d{Tensor::vector({1, 0}), Tensor::vector({0, 1})};
  auto db = DescriptorDb::build(d, ids(2));
  EXPECT_THROW(search(db, std::vector<double>{1, 0, 0}, 1), Error);
  EXPECT_THROW(search(db, std::vector<double>{1, 0}, 3), Error);
  EXPECT_THROW(search(db, std::vector<double>{1, 0}, 0), Error);
}

TEST(Recall, TopHitTenMetresAway) {
  std::vector<Descriptor> d{Tensor::vector({1, 0})};
  auto db = DescriptorDb::build(d, {geo("d", 10, 0)});
  auto r = recall_at_k({rows({0})}, {geo("q", 0, 0)}, db, GroundTruth::geo(), {1});
  EXPECT_EQ(r.recall.at(1), 100.0);
  EXPECT_EQ(r.n_queries, 1u);
}

TEST(Recall, HandEnumeratedRanks) {
  // db rows 0..5 at x = 0, 100, ..., 500. Query a sits at row 3, query b is
  // 30 m from row 5, which is never retrieved.
  std::vector<Descriptor> d;
  for (int i = 0; i < 6; ++i) d.push_back(Tensor::vector({1, 0}));
  auto db = DescriptorDb::build(d, ids(6));
  std::vector<io::RowMeta> q{geo("a", 300, 0), geo("b", 500, 30)};
  auto r = recall_at_k({rows({0, 1, 3, 2, 4}), rows({0, 1, 2, 3, 4})}, q, db, GroundTruth::geo(25), {1, 5});
  EXPECT_EQ(r.n_queries, 1u);
  EXPECT_EQ(r.n_excluded, 1u);
  EXPECT_EQ(r.recall.at(1), 0.0);
  EXPECT_EQ(r.recall.at(5), 100.0);

  // With a 40 m threshold both queries count: one hit at rank 3, one never.
  auto wide = recall_at_k({rows({0, 1, 3, 2, 4}), rows({0, 1, 2, 3, 4})}, q, db, GroundTruth::geo(40), {1, 5});
  EXPECT_EQ(wide.n_queries, 2u);
  EXPECT_EQ(wide.recall.at(1), 0.0);
  EXPECT_EQ(wide.recall.at(5), 50.0);
}

TEST(Recall, FrameWindow) {
  EXPECT_TRUE(is_positive(frame("q", 100), frame("d", 110), GroundTruth::frame()));
  EXPECT_FALSE(is_positive(frame("q", 100), frame("d", 111), GroundTruth::frame()));
  EXPECT_TRUE(is_positive(frame("q", 100), frame("d", 90), GroundTruth::frame()));
}

TEST(Recall, ExactMatchIds) {
  io::RowMeta a, b;
  a.match_id = "x";
  b.match_id = "x";
  EXPECT_TRUE(is_positive(a, b, GroundTruth::exact()));
  b.match_id = "y";
  EXPECT_FALSE(is_positive(a, b, GroundTruth::exact()));
  b.match_id.reset();
  EXPECT_THROW(is_positive(a, b, GroundTruth::exact()), Error);
}

TEST(Recall, MissingCoordinatesRejected) {
  EXPECT_THROW(is_positive(frame("q", 1), geo("d", 0, 0), GroundTruth::geo()), Error);
  EXPECT_THROW(is_positive(geo("q", 0, 0), frame("d", 1), GroundTruth::frame()), Error);
}

TEST(Recall, MatchesOracleAndIsMonotone) {
  const std::vector<std::size_t> ks{1, 5, 10, 20};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto f = vpr::testing::retrieval_fixture(seed);
    auto db = DescriptorDb::build(f.db, f.db_meta);
    auto qdb = DescriptorDb::build(f.queries, f.query_meta);
    const std::vector<std::pair<GroundTruth, double>> regimes{
        {GroundTruth::geo(25), 25}, {GroundTruth::frame(10), 10}, {GroundTruth::exact(), 0}};
    for (const auto& [gt, thr] : regimes) {
      auto report = evaluate(db, qdb, gt, ks);
      auto oracle = vpr::testing::recall_oracle(f, gt.regime, thr, ks);
      double prev = 0;
      for (auto k : ks) {
        EXPECT_NEAR(report.recall.at(k), oracle.at(k), 1e-9) << to_string(gt.regime) << " K=" << k;
        EXPECT_GE(report.recall.at(k), prev);
        EXPECT_LE(report.recall.at(k), 100.0);
        prev = report.recall.at(k);
      }
    }
    auto small = evaluate(db, qdb, GroundTruth::geo(25), {5});
    auto large = evaluate(db, qdb, GroundTruth::geo(60), {5});
    EXPECT_GE(large.n_queries, small.n_queries);
  }
}

TEST(Recall, SelfEvaluationIsPerfect) {
  auto f = vpr::testing::retrieval_fixture(4);
  auto db = DescriptorDb::build(f.db, f.db_meta);
  auto report = evaluate(db, db, GroundTruth::geo(0), {1});
  EXPECT_EQ(report.recall.at(1), 100.0);
  EXPECT_EQ(report.n_queries, 100u);
}

TEST(Recall, ReportRendering) {
  auto f = vpr::testing::retrieval_fixture(1);
  auto db = DescriptorDb::build(f.db, f.db_meta);
  auto report = evaluate(db, db, GroundTruth::frame(10), {1, 5});
  EXPECT_EQ(report.to_json(),
            R"({"regime":"frame","threshold":10.0,"n_queries":100,"n_excluded":0,"recall":{"1":100.0,"5":100.0}})");
  const auto table = report.to_table();
  EXPECT_NE(table.find("R@5"), std::string::npos);
  EXPECT_NE(table.find("100.00"), std::string::npos);
  EXPECT_EQ(parse_regime("exact"), Regime::Exact);
  EXPECT_THROW(parse_regime("nearby"), Error);
  EXPECT_THROW(evaluate(db, db, GroundTruth::geo(), {}), Error);
}
