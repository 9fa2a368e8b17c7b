#include "oracles.hpp"
#include "sclqa/dataset.hpp"
#include "sclqa/encoder.hpp"
#include "sclqa/scl_loss.hpp"
#include "sclqa/scl_train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

using namespace sclqa;
namespace fs = std::filesystem;

namespace {

std::string record(const std::string& id, const std::vector<double>& emb, const std::string& label = "") {
  nlohmann::json j{{"id", id}, {"embedding", emb}};
  if (!label.empty()) j["label"] = label;
  return j.dump() + "\n";
}

Dataset parse(const std::string& text) {
  std::istringstream in(text);
  return parse_jsonl(in, "mem");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("sclqa_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Records

TEST(Jsonl, ThreeValidLines) {
  const auto ds = parse(record("a", {1, 2, 3, 4}, "x") + record("b", {0, 0, 1, 0}, "y") +
                        record("c", {1, 1, 1, 1}, "x"));
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim, 4u);
  EXPECT_EQ(ds.catalog.known, (std::vector<ClassId>{0, 1}));
  EXPECT_EQ(ds.label_names, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(ds.labels(), (std::vector<ClassId>{0, 1, 0}));
}

TEST(Jsonl, DimensionMismatchNamesLine) {
  const auto msg = error_of([] { parse(record("a", {1, 2, 3, 4}) + record("b", {1, 2, 3})); });
  EXPECT_NE(msg.find("mem:2:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("dimension mismatch"), std::string::npos) << msg;
}

TEST(Jsonl, DuplicateId) {
  const auto msg = error_of([] { parse(record("q1", {1, 2}) + record("q1", {3, 4})); });
  EXPECT_NE(msg.find("duplicate id 'q1'"), std::string::npos) << msg;
}

TEST(Jsonl, MalformedAndEmpty) {
  EXPECT_NE(error_of([] { parse(record("a", {1}) + "{not json\n"); }).find("mem:2:"), std::string::npos);
  EXPECT_THROW(parse(""), DataError);
  EXPECT_THROW(parse(R"({"id":"a","embedding":[1],"token_embeddings":[[1]]})"), DataError);
  EXPECT_THROW(parse(R"({"id":"a"})"), DataError);
}

TEST(Jsonl, TokenLevelRecordsArePooled) {
  const auto ds = parse(R"({"id":"t","token_embeddings":[[1,0],[0,1]],"label":"a"})"
                        "\n");
  ASSERT_TRUE(ds.samples[0].is_token_level());
  EXPECT_EQ(sentence_input(ds.samples[0]), (Vector(2) << 0.5, 0.5).finished());
}

TEST(Jsonl, RoundTripIsBitExact) {
  Rng rng(7);
  Dataset ds = generate_synthetic(3, 5, 6, 4.0, 11);
  for (auto& s : ds.samples) {
    Vector v = s.embedding();
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = double(float(v[k] * rng.uniform(0.1, 3.0)));
    s.input = v;
  }
  std::ostringstream out;
  write_jsonl(ds, out);
  std::istringstream in(out.str());
  const auto back = parse_jsonl(in, "rt");
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
    EXPECT_EQ(back.samples[i].embedding(), ds.samples[i].embedding());
    EXPECT_EQ(back.label_name(*back.samples[i].label), ds.label_name(*ds.samples[i].label));
  }
}

// ---------------------------------------------------------------------------
// Binary formats

TEST(Emb1, ZerosAndValues) {
  std::string zeros = "EMB1";
  zeros += std::string("\x02\x00\x00\x00\x03\x00\x00\x00", 8) + std::string(24, '\0');
  std::istringstream in(zeros);
  EXPECT_EQ(read_embedding_matrix(in, "z"), Matrix::Zero(2, 3));

  std::ostringstream out;
  write_embedding_matrix((Matrix(1, 2) << 1.0, -1.0).finished(), out);
  std::istringstream back(out.str());
  EXPECT_EQ(read_embedding_matrix(back, "v"), (Matrix(1, 2) << 1.0, -1.0).finished());
  EXPECT_EQ(out.str().size(), 4u + 8u + 8u);
}

TEST(Emb1, TruncatedAndBadMagic) {
  std::string data = "EMB1";
  data += std::string("\x02\x00\x00\x00\x03\x00\x00\x00", 8) + std::string(20, '\0');
  std::istringstream in(data);
  const auto msg = error_of([&] { read_embedding_matrix(in, "t"); });
  EXPECT_NE(msg.find("truncated payload (expected 24 bytes)"), std::string::npos) << msg;
  std::istringstream bad("EMB2\x01\x00\x00\x00");
  EXPECT_THROW(read_embedding_matrix(bad, "b"), DataError);
}

TEST(Emb1, FileRoundTripWithLabels) {
  const auto dir = temp_dir("emb");
  Rng rng(3);
  Matrix m(5, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = double(float(rng.normal()));
  save_embedding_matrix(m, (dir / "x.emb").string());
  save_labels({2, 0, 1, 2, 0}, (dir / "y.lbl").string());
  EXPECT_EQ(load_embedding_matrix((dir / "x.emb").string()), m);
  const auto labels = load_labels((dir / "y.lbl").string());
  EXPECT_EQ(labels, (std::vector<std::uint32_t>{2, 0, 1, 2, 0}));
  const auto ds = dataset_from_matrix(m, &labels);
  EXPECT_EQ(ds.catalog.known, (std::vector<ClassId>{0, 1, 2}));
  EXPECT_EQ(ds.samples[3].id, "3");
  const std::vector<std::uint32_t> short_labels{1};
  EXPECT_THROW(dataset_from_matrix(m, &short_labels), DataError);
}

// ---------------------------------------------------------------------------
// Segmentation and splits

TEST(Segment, Counts) {
  LabelCatalog c150, c4;
  for (int i = 0; i < 150; ++i) c150.known.push_back(i);
  for (int i = 0; i < 4; ++i) c4.known.push_back(i);
  const auto s150 = segment_intents(c150, 112.0 / 150.0, 5);
  EXPECT_EQ(s150.known.size(), 112u);
  EXPECT_EQ(s150.unknown.size(), 38u);
  const auto s4 = segment_intents(c4, 0.75, 5);
  EXPECT_EQ(s4.known.size(), 3u);
  EXPECT_EQ(s4.unknown.size(), 1u);
  s4.validate();
}

TEST(Segment, DeterministicAndSeedSensitive) {
  LabelCatalog c;
  for (int i = 0; i < 40; ++i) c.known.push_back(i);
  EXPECT_EQ(segment_intents(c, 0.75, 9).known, segment_intents(c, 0.75, 9).known);
  std::set<std::vector<ClassId>> seen;
  for (std::uint64_t s = 0; s < 5; ++s) seen.insert(segment_intents(c, 0.75, s).known);
  EXPECT_GT(seen.size(), 1u);
}

TEST(Segment, EmptySideIsAnError) {
  LabelCatalog c{{0, 1}, {}, {}};
  EXPECT_THROW(segment_intents(c, 0.1, 1), std::invalid_argument);
  EXPECT_THROW(segment_intents(c, 0.9, 1), std::invalid_argument);
}

TEST(Splits, StratifiedTestTwo) {
  const auto ds = generate_synthetic(4, 25, 3, 5.0, 1);
  const auto b = make_splits(ds, ds.catalog, {0.1, 0.2, 0.2}, 4);
  ASSERT_EQ(b.test2.size(), 20u);
  std::map<ClassId, int> per;
  for (ClassId c : b.test2.labels()) ++per[c];
  for (const auto& [c, n] : per) EXPECT_EQ(n, 5) << c;
}

TEST(Splits, PartitionPurityAndDeterminism) {
  const auto ds = generate_synthetic(8, 30, 3, 5.0, 2);
  const auto cat = segment_intents(ds.catalog, 0.75, 3);
  const auto b = make_splits(ds, cat, {0.1, 0.2, 0.2}, 4);
  std::multiset<std::string> ids;
  for (const auto* part : {&b.train, &b.val, &b.test1, &b.test2}) {
    for (const auto& s : part->samples) ids.insert(s.id);
  }
  std::size_t dropped = 0;
  for (const auto& s : ds.samples) {
    const auto n = ids.count(s.id);
    EXPECT_LE(n, 1u) << s.id;
    if (n == 0) {
      EXPECT_TRUE(cat.is_unknown(*s.label)) << s.id;
      ++dropped;
    }
  }
  EXPECT_GT(dropped, 0u);
  for (ClassId c : b.train.labels()) EXPECT_TRUE(cat.is_known(c));
  for (const auto* part : {&b.val, &b.test1, &b.test2}) {
    const auto l = part->labels();
    EXPECT_TRUE(std::any_of(l.begin(), l.end(), [&](ClassId c) { return cat.is_unknown(c); }));
    EXPECT_TRUE(std::any_of(l.begin(), l.end(), [&](ClassId c) { return cat.is_known(c); }));
  }
  std::ostringstream m1, m2;
  write_split_manifest(b, m1);
  write_split_manifest(make_splits(ds, cat, {0.1, 0.2, 0.2}, 4), m2);
  EXPECT_EQ(m1.str(), m2.str());
}

TEST(Splits, SingletonClassCannotBeStratified) {
  auto ds = generate_synthetic(2, 1, 2, 5.0, 1);
  EXPECT_THROW(make_splits(ds, ds.catalog, {}, 1), DataError);
}

// ---------------------------------------------------------------------------
// Synthetic data

TEST(Synthetic, SmallCase) {
  const auto ds = generate_synthetic(2, 1, 2, 50.0, 3);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_NE(*ds.samples[0].label, *ds.samples[1].label);
}

TEST(Synthetic, SeparationAndLawOfLargeNumbers) {
  const auto syn = generate_synthetic_with_means(3, 1000, 4, 6.0, 5);
  for (std::size_t a = 0; a < syn.means.size(); ++a) {
    for (std::size_t b = a + 1; b < syn.means.size(); ++b) EXPECT_GE((syn.means[a] - syn.means[b]).norm(), 6.0);
  }
  std::vector<Vector> sums(3, Vector::Zero(4));
  for (const auto& s : syn.data.samples) sums[std::size_t(*s.label)] += s.embedding();
  for (std::size_t c = 0; c < 3; ++c) {
    const Vector dev = sums[c] / 1000.0 - syn.means[c];
    EXPECT_LT(dev.cwiseAbs().maxCoeff(), 3.0 / std::sqrt(1000.0));
  }
}

TEST(Synthetic, Deterministic) {
  const auto a = generate_synthetic(3, 4, 5, 6.0, 8);
  const auto b = generate_synthetic(3, 4, 5, 6.0, 8);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.samples[i].embedding(), b.samples[i].embedding());
}

// ---------------------------------------------------------------------------
// Encoder

TEST(Encoder, MeanPool) {
  auto v = [](double a, double b) { return (Vector(2) << a, b).finished(); };
  EXPECT_EQ(mean_pool(std::vector<Vector>{v(1, 0), v(0, 1)}), v(0.5, 0.5));
  EXPECT_EQ(mean_pool(std::vector<Vector>{v(3, -2)}), v(3, -2));
  EXPECT_EQ(mean_pool(std::vector<Vector>{v(2, 2), v(4, 4), v(0, 0)}), v(2, 2));
  EXPECT_THROW(mean_pool(std::vector<Vector>{}), std::invalid_argument);
  std::vector<Vector> toks{v(1, 5), v(-3, 2), v(0.25, 7)};
  const Vector fwd = mean_pool(toks);
  std::reverse(toks.begin(), toks.end());
  EXPECT_LT((mean_pool(toks) - fwd).norm(), 1e-15);
}

TEST(Encoder, L2Normalize) {
  const Vector n = l2_normalize((Vector(2) << 3, 4).finished());
  EXPECT_NEAR(n[0], 0.6, 1e-15);
  EXPECT_NEAR(n[1], 0.8, 1e-15);
  EXPECT_LT((l2_normalize(n) - n).norm(), 1e-15);
  EXPECT_THROW(l2_normalize(Vector::Zero(2)), NumericError);
}

TEST(Encoder, IdentityAndZeroWeights) {
  const auto id = make_identity_encoder(3);
  const Vector u = l2_normalize((Vector(3) << 1, -2, 2).finished());
  EXPECT_LT((forward(id, u) - u).norm(), 1e-15);
  ProjectionEncoder zero = make_default_encoder(3, 0.0, 1);
  for (auto& l : zero.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  EXPECT_THROW(forward(zero, u), NumericError);
  EXPECT_THROW(forward(id, Vector::Ones(4)), std::invalid_argument);
}

TEST(Encoder, DeterministicAndUnitNorm) {
  const auto enc = make_default_encoder(8, 0.1, 4);
  Rng rng(5);
  Vector x(8);
  for (auto& v : x) v = rng.normal();
  const auto masks = sample_masks(enc, 0.1, rng);
  EXPECT_EQ(forward(enc, x, &masks), forward(enc, x, &masks));
  EXPECT_EQ(forward(enc, x), forward(enc, x));
  const Matrix h = encode(enc, oracle::random_unit_rows(50, 8, rng) * 3.0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) EXPECT_LT(std::abs(h.row(i).norm() - 1.0), 1e-6);
}

TEST(Encoder, Validation) {
  auto enc = make_default_encoder(4, 0.1, 1);
  enc.dropout_p = 1.0;
  EXPECT_THROW(enc.validate(), std::invalid_argument);
  enc.dropout_p = 0.1;
  enc.layers[1].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(enc.validate(), NumericError);
  enc = make_default_encoder(4, 0.1, 1);
  enc.layers[1].weight = Matrix::Zero(4, 5);
  EXPECT_THROW(enc.validate(), std::invalid_argument);
}

TEST(Encoder, CheckpointRoundTrip) {
  const auto enc = make_default_encoder(5, 0.1, 3);
  std::stringstream buf;
  write_encoder(enc, buf);
  const auto back = read_encoder(buf, "mem");
  ASSERT_EQ(back.layers.size(), enc.layers.size());
  for (std::size_t k = 0; k < enc.layers.size(); ++k) {
    EXPECT_EQ(back.layers[k].weight, enc.layers[k].weight.cast<float>().cast<double>());
    EXPECT_EQ(back.layers[k].bias, enc.layers[k].bias.cast<float>().cast<double>());
  }
  EXPECT_DOUBLE_EQ(back.dropout_p, double(float(0.1)));
}

TEST(Dropout, InvertedScalingHasUnitExpectation) {
  // Monte-Carlo mean of masked hidden activations against the no-dropout
  // activations, per unit, within three standard errors.
  const auto enc = make_default_encoder(16, 0.1, 21);
  Rng rng(22);
  Vector x(16);
  for (auto& v : x) v = rng.normal();
  const Vector a = ((enc.layers[0].weight * x) + enc.layers[0].bias).array().tanh().matrix();
  const int n = 20000;
  Vector sum = Vector::Zero(a.size()), sum2 = Vector::Zero(a.size());
  for (int t = 0; t < n; ++t) {
    const Vector s = a.cwiseProduct(sample_mask(std::size_t(a.size()), 0.1, rng).multiplier());
    sum += s;
    sum2 += s.cwiseProduct(s);
  }
  const Vector mean = sum / n;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double var = sum2[k] / n - mean[k] * mean[k];
    const double se = std::sqrt(var / n);
    EXPECT_LE(std::abs(mean[k] - a[k]), 3.0 * se + 1e-15) << "unit " << k;
  }
}

TEST(Views, ZeroDropoutGivesIdenticalViews) {
  const auto enc = make_default_encoder(6, 0.0, 1);
  Rng rng(2);
  const Vector x = Vector::LinSpaced(6, -1, 1);
  const auto [a, b] = make_views(enc, x, rng);
  EXPECT_EQ(a, b);
}

TEST(Views, CosineBand) {
  // Band observed over 1000 seeds before the build: min 0.544, p05 0.812,
  // 96.6% of seeds inside (0.8, 1.0).
  auto cosine = [](std::uint64_t s) {
    const auto enc = make_default_encoder(32, 0.1, derive_seed(s, 1));
    Rng rng(derive_seed(s, 2));
    Vector x(32);
    for (auto& v : x) v = rng.normal();
    const auto [a, b] = make_views(enc, x, rng);
    return a.dot(b);
  };
  const double c0 = cosine(0);
  EXPECT_GT(c0, 0.8);
  EXPECT_LT(c0, 1.0);
  int inside = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const double c = cosine(s);
    inside += c > 0.8 && c < 1.0;
  }
  EXPECT_GE(inside, 950);
}

TEST(Views, PairsAreAdjacentWithEqualLabels) {
  const Matrix x = (Matrix(2, 3) << 1, 2, 3, 4, 5, 6).finished();
  const std::vector<ClassId> y{7, 8, 7};
  const Matrix v = replicate_views(x, 2);
  const auto vl = replicate_labels(y, 2);
  ASSERT_EQ(v.cols(), 6);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_EQ(v.col(2 * i), x.col(i));
    EXPECT_EQ(v.col(2 * i + 1), x.col(i));
    EXPECT_EQ(vl[std::size_t(2 * i)], y[std::size_t(i)]);
    EXPECT_EQ(vl[std::size_t(2 * i + 1)], y[std::size_t(i)]);
  }
}

// ---------------------------------------------------------------------------
// Contrastive loss

namespace {

/// Anchor h, positive p and negative q with h.p = 0.9 and h.q = p.q = 0.1.
Matrix three_point_batch() {
  const double a = 0.01 / std::sqrt(0.19);
  Matrix h(3, 3);
  h << 1, 0, 0, 0.9, std::sqrt(0.19), 0, 0.1, a, std::sqrt(1 - 0.01 - a * a);
  return h;
}

}  // namespace

TEST(SclLoss, HandExamples) {
  const std::vector<ClassId> y{0, 0, 1};
  const Matrix h = three_point_batch();
  // Both anchors with a positive contribute (0.1 - 0.9) / 0.1; the negative
  // has no positive and is skipped.
  EXPECT_NEAR(scl_loss(h, y, {0.1}), -8.0, 1e-12);
  EXPECT_NEAR(oracle::scl_loss(h, y, 0.1), -8.0, 1e-12);

  // Mutually orthogonal rows: every similarity is equal, so each anchor's
  // positive and negative terms cancel.
  EXPECT_NEAR(scl_loss(Matrix::Identity(3, 3), y, {0.1}), 0.0, 1e-15);
}

TEST(SclLoss, MatchesDirectEvaluation) {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    const int n = 4 + int(rng.index(9));
    const int d = 2 + int(rng.index(15));
    const Matrix h = oracle::random_unit_rows(n, d, rng);
    std::vector<ClassId> y;
    for (int i = 0; i < n; ++i) y.push_back(ClassId(i % 2 == 0 ? rng.index(3) : y.back()));
    y[0] = 0;
    y[1] = 0;
    y[2] = 1;
    y[3] = 1;
    for (double tau : {0.05, 0.1, 0.5}) {
      for (bool incl : {false, true}) {
        const double ref = oracle::scl_loss(h, y, tau, incl);
        const double got = scl_loss(h, y, {tau, incl});
        EXPECT_LE(std::abs(got - ref), 1e-10 * std::max(1.0, std::abs(ref))) << t;
      }
    }
  }
}

TEST(SclLoss, Errors) {
  Rng rng(1);
  const Matrix h = oracle::random_unit_rows(3, 2, rng);
  EXPECT_THROW(scl_loss(h, std::vector<ClassId>{0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(scl_loss(h, std::vector<ClassId>{0, 1, 2}), std::invalid_argument);
  EXPECT_THROW(scl_loss(h, std::vector<ClassId>{0, 0, 1}, {0.0}), std::invalid_argument);
  EXPECT_THROW(scl_loss(h, std::vector<ClassId>{0, 1}), std::invalid_argument);
}

TEST(SclLoss, GradientMatchesFiniteDifferences) {
  Rng rng(41);
  for (int t = 0; t < 20; ++t) {
    const int n = 4 + int(rng.index(9));
    const int d = 2 + int(rng.index(15));
    const double tau = std::array{0.05, 0.1, 0.5}[std::size_t(t % 3)];
    const Matrix h = oracle::random_unit_rows(n, d, rng);
    std::vector<ClassId> y;
    for (int i = 0; i < n; ++i) y.push_back(i / 2 % 3);
    const Matrix analytic = scl_grad(h, y, {tau});
    const Matrix numeric = oracle::numeric_gradient([&](const Matrix& m) { return oracle::scl_loss(m, y, tau); }, h);
    EXPECT_LT(oracle::max_rel_error(analytic, numeric, 1e-4), 1e-4) << "instance " << t;
  }
}

TEST(SclLoss, TemperatureHalvingDoublesGradient) {
  // With one positive and one negative per anchor the loss is linear in the
  // similarities, so halving tau exactly doubles every gradient component.
  const std::vector<ClassId> y{0, 0, 1};
  const Matrix h = three_point_batch();
  auto fd = [&](double tau) {
    return oracle::numeric_gradient([&](const Matrix& m) { return oracle::scl_loss(m, y, tau); }, h);
  };
  const Matrix g1 = fd(0.1), g2 = fd(0.05);
  EXPECT_LT(oracle::max_rel_error(g2, 2.0 * g1, 1e-6), 1e-6);
  EXPECT_LT(oracle::max_rel_error(scl_grad(h, y, {0.1}), g1, 1e-6), 1e-6);
  EXPECT_LT(oracle::max_rel_error(scl_grad(h, y, {0.05}), g2, 1e-6), 1e-6);
}

TEST(SclLoss, SymmetricPerturbationHasZeroDerivative) {
  // All similarities equal; moving every row along the same direction u
  // changes every similarity by the same amount, which the loss ignores.
  const Matrix h = Matrix::Identity(3, 3);
  const std::vector<ClassId> y{0, 0, 1};
  const Matrix dir = Matrix::Ones(3, 3) / std::sqrt(3.0);
  const double along = (scl_grad(h, y, {0.1}).array() * dir.array()).sum();
  const double fd =
      (oracle::scl_loss(h + 1e-6 * dir, y, 0.1) - oracle::scl_loss(h - 1e-6 * dir, y, 0.1)) / 2e-6;
  EXPECT_NEAR(along, 0.0, 1e-12);
  EXPECT_NEAR(fd, 0.0, 1e-8);
}

TEST(SclLoss, RotationInvariance) {
  Rng rng(51);
  for (int t = 0; t < 10; ++t) {
    const Matrix h = oracle::random_unit_rows(10, 8, rng);
    const std::vector<ClassId> y{0, 0, 1, 1, 2, 2, 0, 1, 2, 0};
    const Matrix r = oracle::random_rotation(8, rng);
    EXPECT_LT(std::abs(scl_loss(h * r.transpose(), y) - scl_loss(h, y)), 1e-9);
  }
}

TEST(SclLoss, GradientThroughEncoder) {
  Rng rng(61);
  for (int t = 0; t < 5; ++t) {
    auto enc = make_encoder(6, {10}, 5, 0.2, derive_seed(61, std::uint64_t(t)));
    Matrix x(6, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const Matrix views = replicate_views(x, 2);
    const auto labels = replicate_labels(std::vector<ClassId>{0, 1, 0, 2}, 2);
    const auto mul = sample_batch_multipliers(enc, views.cols(), 0.2, rng);
    const SclLossOptions opt{0.1, false};
    const auto bg = scl_batch_gradient(enc, views, labels, mul, opt);
    for (std::size_t k = 0; k < enc.layers.size(); ++k) {
      auto loss_w = [&](const Matrix& w) {
        auto e = enc;
        e.layers[k].weight = w;
        return oracle::scl_loss(forward_batch(e, views, mul).transpose(), labels, 0.1);
      };
      auto loss_b = [&](const Matrix& b) {
        auto e = enc;
        e.layers[k].bias = b;
        return oracle::scl_loss(forward_batch(e, views, mul).transpose(), labels, 0.1);
      };
      EXPECT_LT(oracle::max_rel_error(bg.grads[k].weight, oracle::numeric_gradient(loss_w, enc.layers[k].weight), 1e-4), 1e-4);
      EXPECT_LT(oracle::max_rel_error(bg.grads[k].bias, oracle::numeric_gradient(loss_b, Matrix(enc.layers[k].bias)), 1e-4), 1e-4);
    }
  }
}
