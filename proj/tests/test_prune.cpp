#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <set>

#include "jointlk/prune.hpp"
#include "jointlk/rng.hpp"

using namespace jointlk;

TEST_CASE("node_importance: uniform attention gives 1/|V|") {
  Tape t;
  const std::size_t m = 3, n = 4;
  Tensor att = t.full({m, n}, 1.0 / n);
  Tensor z = node_importance(t, att, {1, 1, 1});
  for (double v : z.values()) CHECK(v == doctest::Approx(1.0 / n).epsilon(1e-12));
}

TEST_CASE("node_importance: M=1 returns the single attention row") {
  Tape t;
  Tensor att = t.leaf({1, 3}, {0.2, 0.5, 0.3});
  Tensor z = node_importance(t, att, {1});
  CHECK(z.values() == std::vector<double>{0.2, 0.5, 0.3});
}

TEST_CASE("node_importance: column means on a random 3x4 case, mass sums to 1") {
  Rng rng(51);
  const std::size_t m = 3, n = 4;
  std::vector<double> rows(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double z = 0.0;
    std::vector<double> raw(n);
    for (std::size_t j = 0; j < n; ++j) {
      raw[j] = rng.uniform(0.01, 1.0);
      z += raw[j];
    }
    for (std::size_t j = 0; j < n; ++j) rows[i * n + j] = raw[j] / z;
  }
  Tape t;
  Tensor z = node_importance(t, t.leaf({m, n}, rows), {1, 1, 1});
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mean = (rows[j] + rows[n + j] + rows[2 * n + j]) / 3.0;
    CHECK(z.values()[j] == doctest::Approx(mean).epsilon(1e-12));
    total += z.values()[j];
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("node_importance: masked tokens are excluded; all-masked rejected") {
  Tape t;
  Tensor att = t.leaf({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor z = node_importance(t, att, {1, 0});
  CHECK(z.values() == std::vector<double>{1.0, 0.0});
  CHECK_THROWS_AS(node_importance(t, att, {0, 0}), std::invalid_argument);
}

TEST_CASE("top_rank: K=1 keeps everything") {
  std::vector<double> z = {0.5, 0.1, 0.9, 0.3};
  auto kept = top_rank(z, 1.0, {});
  CHECK(kept == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("top_rank: ceiling arithmetic") {
  // 5 prunable at K=0.5 -> ceil(2.5)=3 kept plus the exempt
  std::vector<double> z = {0.9, 0.1, 0.2, 0.3, 0.4, 0.5};
  auto kept = top_rank(z, 0.5, {0});
  CHECK(kept.size() == 4);
  CHECK(std::count(kept.begin(), kept.end(), 0) == 1);

  // 50 prunable at K=0.92 -> 46 kept
  std::vector<double> z50(50);
  for (std::size_t i = 0; i < 50; ++i) z50[i] = static_cast<double>(i);
  CHECK(top_rank(z50, 0.92, {}).size() == 46);
}

TEST_CASE("top_rank: ties break toward the lower index; output sorted") {
  std::vector<double> z = {0.5, 0.5, 0.5, 0.5};
  auto kept = top_rank(z, 0.5, {});
  CHECK(kept == std::vector<std::size_t>{0, 1});
}

TEST_CASE("top_rank: invariant under positive rescaling") {
  Rng rng(52);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> z(10);
    for (double& v : z) v = rng.uniform(0, 1);
    const double k = rng.uniform(0.05, 1.0);
    auto a = top_rank(z, k, {3});
    std::vector<double> scaled = z;
    const double c = rng.uniform(0.1, 7.0);
    for (double& v : scaled) v *= c;
    CHECK(a == top_rank(scaled, k, {3}));
  }
}

TEST_CASE("top_rank: rejects out-of-range retention") {
  std::vector<double> z = {0.1, 0.2};
  CHECK_THROWS_AS(top_rank(z, 0.0, {}), std::invalid_argument);
  CHECK_THROWS_AS(top_rank(z, 1.5, {}), std::invalid_argument);
}

TEST_CASE("apply_prune: keep-all with unit gates is the identity") {
  Tape t;
  Tensor x = t.leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor z = t.full({3, 1}, 1.0);
  std::vector<Edge> edges = {{0, 1, 1}, {1, 2, 2}};
  PrunedGraph out = apply_prune(t, x, edges, {0, 1, 2}, z);
  CHECK(out.x.values() == x.values());
  CHECK(out.edges == edges);
}

TEST_CASE("apply_prune: pruning the middle of a chain leaves no shortcut") {
  Tape t;
  Tensor x = t.leaf({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor z = t.leaf({3, 1}, {0.5, 0.1, 0.4});
  std::vector<Edge> edges = {{0, 1, 1}, {1, 1, 0}, {1, 2, 2}, {2, 2, 1}};
  PrunedGraph out = apply_prune(t, x, edges, {0, 2}, z);
  CHECK(out.edges.empty());
  CHECK(out.old_to_new == std::vector<int>{0, -1, 1});
  // gated rows
  CHECK(out.x.at(0, 0) == doctest::Approx(1 * 0.5).epsilon(1e-12));
  CHECK(out.x.at(1, 1) == doctest::Approx(6 * 0.4).epsilon(1e-12));
}

TEST_CASE("apply_prune equals the filter-and-relabel oracle exhaustively") {
  Rng rng(53);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(7);  // up to 8 nodes
    std::vector<Edge> edges;
    for (std::size_t e = 0; e < 2 * n; ++e) {
      int u = static_cast<int>(rng.below(n)), w = static_cast<int>(rng.below(n));
      if (u != w) edges.push_back({u, static_cast<int>(rng.below(5)), w});
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

    // a random kept set of random size (nonempty)
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i)
      if (rng.bernoulli(0.6)) kept.push_back(i);
    if (kept.empty()) kept.push_back(rng.below(n));

    std::vector<double> zv(n);
    for (double& v : zv) v = rng.uniform(0.01, 1.0);
    std::vector<double> xv(n * 2);
    for (double& v : xv) v = rng.uniform(-1, 1);

    Tape t;
    Tensor x = t.leaf({n, 2}, xv);
    Tensor z = t.leaf({n, 1}, zv);
    PrunedGraph out = apply_prune(t, x, edges, kept, z);

    // oracle: filter edges with both endpoints kept, relabel by kept order
    std::map<int, int> relabel;
    for (std::size_t r = 0; r < kept.size(); ++r) relabel[static_cast<int>(kept[r])] = static_cast<int>(r);
    std::vector<Edge> expect;
    for (const Edge& e : edges)
      if (relabel.count(e.src) && relabel.count(e.dst))
        expect.push_back({relabel[e.src], e.rel, relabel[e.dst]});
    std::sort(expect.begin(), expect.end());
    CHECK(out.edges == expect);
    for (std::size_t r = 0; r < kept.size(); ++r)
      for (std::size_t d = 0; d < 2; ++d)
        CHECK(out.x.at(r, d) ==
              doctest::Approx(xv[kept[r] * 2 + d] * zv[kept[r]]).epsilon(1e-12));
  }
}

TEST_CASE("gating keeps the retention decision on the gradient path") {
  Tape t;
  Tensor x = t.leaf({2, 2}, {1, 1, 1, 1});
  Tensor z = t.leaf({2, 1}, {0.25, 0.75}, true);
  PrunedGraph out = apply_prune(t, x, {}, {0, 1}, z);
  t.backward(t.sum(out.x));
  CHECK(z.grad() == std::vector<double>{2, 2});
}

TEST_CASE("ceiling recursion: N=5 at K=0.92 from 100 nodes") {
  std::size_t n = 100;
  std::vector<std::size_t> kept_counts;
  for (int l = 0; l < 5; ++l) {
    n = static_cast<std::size_t>(std::ceil(0.92 * static_cast<double>(n)));
    kept_counts.push_back(n);
  }
  CHECK(kept_counts == std::vector<std::size_t>{92, 85, 79, 73, 68});
  CHECK(static_cast<double>(kept_counts.back()) / 100.0 == doctest::Approx(0.68));
}

TEST_CASE("trace layers chain: layer l universe equals layer l-1 kept set") {
  Rng rng(54);
  PruneTrace trace;
  std::vector<double> z = {0.4, 0.1, 0.2, 0.3};
  std::vector<std::string> names = {"a", "b", "c", "d"};
  std::vector<int> original = {0, 1, 2, 3};
  for (int layer = 0; layer < 3 && z.size() > 1; ++layer) {
    auto kept = top_rank(z, 0.6, {});
    PruneLayerRecord rec;
    rec.importance = z;
    rec.kept = kept;
    rec.concepts = names;
    rec.original = original;
    trace.layers.push_back(rec);
    std::vector<double> nz;
    std::vector<std::string> nn;
    std::vector<int> no;
    for (std::size_t k : kept) {
      nz.push_back(z[k] + rng.uniform(-0.05, 0.05));
      nn.push_back(names[k]);
      no.push_back(original[k]);
    }
    z = nz;
    names = nn;
    original = no;
  }
  for (std::size_t l = 1; l < trace.layers.size(); ++l) {
    const auto& prev = trace.layers[l - 1];
    const auto& cur = trace.layers[l];
    REQUIRE(cur.concepts.size() == prev.kept.size());
    for (std::size_t i = 0; i < cur.concepts.size(); ++i)
      CHECK(cur.original[i] == prev.original[prev.kept[i]]);
  }

  // export formats stay well-formed
  const std::string js = trace.to_json();
  CHECK(js.find("\"layers\"") != std::string::npos);
  const std::string dot = trace.to_dot(0);
  CHECK(dot.find("digraph") != std::string::npos);
  CHECK(dot.find("style=dashed") != std::string::npos);
}
