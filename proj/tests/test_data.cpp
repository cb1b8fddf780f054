#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "faircl/data.hpp"
#include "faircl/error.hpp"
#include "faircl/eval.hpp"
#include "faircl/rng.hpp"
#include "tempdir.hpp"

using namespace faircl;
using namespace faircl::data;
using faircl::testing::TempDir;

namespace {

SyntheticCorpusConfig small(std::size_t n = 40, std::uint64_t seed = 3) {
  SyntheticCorpusConfig c;
  c.n_utterances = n;
  c.seed = seed;
  return c;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("synthetic corpus shape and determinism") {
  auto cfg = small();
  auto a = generate_synthetic_corpus(cfg);
  auto b = generate_synthetic_corpus(cfg);
  CHECK(a == b);
  REQUIRE(a.size() == 40);
  std::set<std::string> ids;
  for (const auto& u : a) {
    ids.insert(u.id);
    CHECK(u.transcript.size() >= cfg.min_tokens);
    CHECK(u.transcript.size() <= cfg.max_tokens);
    for (std::size_t k = 0; k < u.transcript.size(); ++k) {
      CHECK(u.transcript[k] >= 1);
      CHECK(u.transcript[k] < static_cast<int>(cfg.vocab_size));
      if (k > 0) CHECK(u.transcript[k] != u.transcript[k - 1]);
    }
    CHECK(u.spec.frames == u.transcript.size() * cfg.frames_per_token);
    CHECK(u.spec.bins == cfg.n_mels);
    CHECK(u.demographics.size() == cfg.schema.size());
    for (double x : u.spec.values) CHECK(x == static_cast<double>(static_cast<float>(x)));
  }
  CHECK(ids.size() == a.size());

  cfg.seed = 4;
  CHECK_FALSE(generate_synthetic_corpus(cfg) == a);
}

TEST_CASE("manifest and feature files round trip exactly") {
  TempDir dir("data_rt");
  auto corpus = generate_synthetic_corpus(small(12));
  write_manifest(corpus, dir / "m.jsonl");
  auto back = load_manifest(dir / "m.jsonl");
  CHECK(back == corpus);

  LoadOptions opt;
  opt.max_frames = 12;  // keeps only the two-token utterances
  auto capped = load_manifest(dir / "m.jsonl", opt);
  CHECK(capped.size() < corpus.size());
  for (const auto& u : capped) CHECK(u.spec.frames <= 12);
}

TEST_CASE("audio records are featurized on load") {
  TempDir dir("data_audio");
  std::vector<float> samples(4000);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = static_cast<float>(std::sin(0.05 * static_cast<double>(i)));
  {
    std::ofstream f(dir / "a.f32", std::ios::binary);
    f.write(reinterpret_cast<const char*>(samples.data()), static_cast<std::streamsize>(samples.size() * 4));
  }
  {
    // 16-bit PCM mono WAV with the same waveform
    std::ofstream f(dir / "b.wav", std::ios::binary);
    auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    f << "RIFF";
    u32(36 + 2 * 4000);
    f << "WAVEfmt ";
    u32(16), u16(1), u16(1), u32(16000), u32(32000), u16(2), u16(16);
    f << "data";
    u32(2 * 4000);
    for (float s : samples) u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(s * 32767.0))));
    f.close();
  }
  write_text(dir / "m.jsonl",
             R"({"id":"a","audio":"a.f32","transcript":"1 2","demographics":{"g":"x"}})"
             "\n"
             R"({"id":"b","audio":"b.wav","transcript":"3","demographics":{"g":"y"}})"
             "\n");
  auto c = load_manifest(dir / "m.jsonl");
  REQUIRE(c.size() == 2);
  CHECK(c[0].spec.frames == features::frame_count(4000, 400, 160));
  CHECK(c[0].spec.bins == 80);
  auto expect = [](const std::vector<double>& wave) {
    auto s = features::mel_spectrogram(wave);
    features::normalize_utterance(s);
    return s;
  };
  std::vector<double> f32(samples.begin(), samples.end()), pcm;
  for (float s : samples) pcm.push_back(static_cast<double>(std::lround(s * 32767.0)) / 32768.0);
  CHECK(c[0].spec == expect(f32));
  CHECK(c[1].spec == expect(pcm));
  CHECK(read_waveform(dir / "b.wav") == pcm);
}

TEST_CASE("manifest errors carry file and line") {
  TempDir dir("data_err");
  auto corpus = generate_synthetic_corpus(small(2));
  write_manifest(corpus, dir / "ok.jsonl");
  std::ifstream in(dir / "ok.jsonl");
  std::string first;
  std::getline(in, first);

  const std::map<std::string, std::string> bad = {
      {"{not json", "malformed"},
      {R"({"id":"z","features":"features/utt0.feat","demographics":{"gender":"female","age_band":"18-30"}})", "transcript"},
      {R"({"id":"z","features":"features/utt0.feat","transcript":"1 x","demographics":{"gender":"female","age_band":"18-30"}})",
       "invalid token 'x'"},
      {R"({"id":"z","features":"features/utt0.feat","transcript":"1 0","demographics":{"gender":"female","age_band":"18-30"}})",
       "invalid token '0'"},
      {R"({"id":"z","features":"nope.feat","transcript":"1","demographics":{"gender":"female","age_band":"18-30"}})", "nope.feat"},
      {R"({"id":"z","transcript":"1","demographics":{"gender":"female","age_band":"18-30"}})", "'features' or 'audio'"},
      {R"({"id":"z","features":"features/utt0.feat","transcript":"1","demographics":{"gender":"female"}})", "missing attribute"},
  };
  for (const auto& [line, needle] : bad) {
    CAPTURE(line);
    write_text(dir / "bad.jsonl", first + "\n" + line + "\n");
    const std::string msg = error_of([&] { load_manifest(dir / "bad.jsonl"); });
    CHECK(msg.find("bad.jsonl:2: ") != std::string::npos);
    CHECK(msg.find(needle) != std::string::npos);
  }

  // truncated feature file
  write_text(dir / "t.feat", std::string("\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00", 10));
  CHECK(error_of([&] { read_feature_file(dir / "t.feat"); }).find("expected 24 bytes") != std::string::npos);
}

TEST_CASE("stratified split is an exact partition with per-stratum proportions") {
  auto cfg = small(301, 9);
  auto corpus = generate_synthetic_corpus(cfg);
  for (double f : {0.2, 0.5, 0.37}) {
    auto split = stratified_split(corpus, f, {}, 77);
    CHECK(split.train.size() + split.test.size() == corpus.size());
    std::set<std::string> seen;
    for (const auto* half : {&split.train, &split.test})
      for (const auto& u : *half) CHECK(seen.insert(u.id).second);
    CHECK(seen.size() == corpus.size());

    std::map<std::string, std::pair<int, int>> counts;  // stratum -> (total, test)
    for (const auto& u : corpus) ++counts[composite_key(u.demographics)].first;
    for (const auto& u : split.test) ++counts[composite_key(u.demographics)].second;
    for (const auto& [k, c] : counts) {
      CAPTURE(k);
      if (c.first < 2) continue;
      CHECK(std::abs(c.second - f * c.first) <= 1.0);
    }
    // corpus order kept inside each half
    auto index_of = [](const std::string& id) { return std::stoi(id.substr(3)); };
    for (std::size_t i = 1; i < split.test.size(); ++i) CHECK(index_of(split.test[i - 1].id) < index_of(split.test[i].id));
    CHECK(stratified_split(corpus, f, {}, 77).test == split.test);
  }
  CHECK_THROWS_AS(stratified_split(corpus, 0.0, {}, 1), ConfigError);
  CHECK_THROWS_AS(stratified_split(corpus, 1.0, {}, 1), ConfigError);

  // lone stratum goes to train with a warning
  Corpus tiny(corpus.begin(), corpus.begin() + 3);
  tiny[2].demographics["gender"] = "unique";
  auto s = stratified_split(tiny, 0.5, {"gender"}, 1);
  CHECK(s.warnings.size() >= 1);
  bool in_train = false;
  for (const auto& u : s.train) in_train |= u.demographics.at("gender") == "unique";
  CHECK(in_train);
}

TEST_CASE("contrastive batch layout and label inheritance") {
  auto corpus = generate_synthetic_corpus(small(5));
  std::vector<const Utterance*> ptrs;
  for (const auto& u : corpus) ptrs.push_back(&u);
  features::AugmentPolicy p;
  p.max_time_mask_width = 3;
  p.max_freq_mask_width = 3;
  auto b = make_contrastive_batch(ptrs, "gender", p, 42);
  REQUIRE(b.size() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(b.pair_of[i] == i + 5);
    CHECK(b.pair_of[i + 5] == i);
    CHECK_FALSE(b.is_augmented[i]);
    CHECK(b.is_augmented[i + 5]);
    CHECK(b.samples[i] == corpus[i].spec);
    CHECK(b.group_key[i] == corpus[i].demographics.at("gender"));
    CHECK(b.group_key[i + 5] == b.group_key[i]);
    Rng r(view_seed(42, i));
    CHECK(b.samples[i + 5] == features::spec_augment(corpus[i].spec, p, r));
  }
  auto comp = make_contrastive_batch(ptrs, kComposite, p, 42);
  CHECK(comp.group_key[0] == composite_key(corpus[0].demographics));
  CHECK_THROWS_AS(make_contrastive_batch({ptrs[0]}, "gender", p, 1), ConfigError);

  features::AugmentPolicy wide;
  wide.max_time_mask_width = 100;
  CHECK(error_of([&] { make_contrastive_batch(ptrs, "gender", wide, 1); }).find("utterance 'utt0'") != std::string::npos);
}

TEST_CASE("group signature is linearly visible only when present") {
  auto probe_mean_features = [](double strength) {
    auto cfg = small(300, 5);
    cfg.group_strength = strength;
    auto corpus = generate_synthetic_corpus(cfg);
    eval::Matrix x;
    std::vector<std::string> labels;
    for (const auto& u : corpus) {
      std::vector<double> mean(u.spec.bins, 0.0);
      for (std::size_t t = 0; t < u.spec.frames; ++t)
        for (std::size_t m = 0; m < u.spec.bins; ++m) mean[m] += u.spec.at(t, m) / static_cast<double>(u.spec.frames);
      x.push_back(mean);
      labels.push_back(u.demographics.at("gender"));
    }
    return eval::demographic_probe(x, labels, "gender", 1);
  };
  auto none = probe_mean_features(0.0);
  auto strong = probe_mean_features(5.0);
  CHECK(strong.test_accuracy > 0.95);
  CHECK(none.test_accuracy < none.chance + 0.15);
}
