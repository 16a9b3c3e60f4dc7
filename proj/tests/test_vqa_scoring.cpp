#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ospo/prompt_forge.hpp"
#include "ospo/questions.hpp"
#include "ospo/rng.hpp"
#include "ospo/simulator.hpp"
#include "ospo/vqa.hpp"

using namespace ospo;

namespace {

/// Scripted backend answering from a fixed question -> probabilities table.
class StubBackend : public Backend {
 public:
  std::map<std::string, ProbeResult> answers;
  ProbeResult fallback{0.5, 0.5};

  ImageArtifact generate_image(const StructuredPrompt&, const DecodeParams&,
                               const CorruptionParams&) override {
    return {};
  }
  ProbeResult vqa_probe(const ImageArtifact&, const std::string& question) override {
    auto it = answers.find(question);
    return it == answers.end() ? fallback : it->second;
  }
  std::string text_complete(const std::vector<Message>&, std::uint64_t) override { return ""; }
};

}  // namespace

TEST_CASE("decomposition yields one question per atomic fact") {
  StructuredPrompt p;
  p.category = Category::Attribute;
  p.entities = {Entity{"bird",
                       {AttributeBinding{AttrKind::Color, "green"},
                        AttributeBinding{AttrKind::Shape, "bright"}}}};
  p.surface = "a bright green bird";
  QuestionSet qs = decompose_questions(p);
  REQUIRE(qs.local.size() == 3);
  CHECK(qs.local[0].question == "Is there a bird?");
  CHECK(qs.local[1].question == "Is the bird green?");
  CHECK(qs.local[2].question == "Is the bird bright?");
}

TEST_CASE("layout decomposition includes the relation question") {
  StructuredPrompt p;
  p.category = Category::Layout;
  p.entities = {Entity{"pancake", {}}, Entity{"pasta", {}}};
  p.relations = {Relation{0, RelationKind::Spatial2D, "on the left of", 1}};
  p.surface = render(p);
  QuestionSet qs = decompose_questions(p);
  REQUIRE(qs.local.size() == 3);
  CHECK(qs.local[0].question == "Is there a pancake?");
  CHECK(qs.local[1].question == "Is there a pasta?");
  CHECK(qs.local[2].question == "Is a pancake on the left of a pasta?");
}

TEST_CASE("the global question follows the fixed template exactly") {
  StructuredPrompt p;
  p.category = Category::Attribute;
  p.entities = {Entity{"car", {}}};
  p.surface = "a car";
  QuestionSet qs = decompose_questions(p);
  CHECK(qs.global ==
        "This image is generated by a prompt: a car. Does this image accurately represent the "
        "prompt?");
}

TEST_CASE("empty prompts cannot be decomposed") {
  StructuredPrompt p;
  CHECK_THROWS_AS(decompose_questions(p), EmptyPrompt);
}

TEST_CASE("count questions cover explicit counts") {
  StructuredPrompt p;
  p.category = Category::Layout;
  p.entities = {Entity{"light bulb", {}}};
  p.counts = {CountBinding{0, 3}};
  p.surface = render(p);
  QuestionSet qs = decompose_questions(p);
  REQUIRE(qs.local.size() == 2);
  CHECK(qs.local[0].question == "Is there a light bulb?");
  CHECK(qs.local[1].question == "Are there three light bulbs?");
}

TEST_CASE("score arithmetic matches the closed form") {
  CHECK(mean_margin({{1.0, 0.0}, {1.0, 0.0}}) == 1.0);
  CHECK(mean_margin({{0.5, 0.5}, {0.5, 0.5}}) == 0.0);
  // Two questions at (0.9, 0.1) and (0.2, 0.8): (0.8 - 0.6) / 2 = 0.1.
  CHECK(mean_margin({{0.9, 0.1}, {0.2, 0.8}}) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("score_image aggregates local and global probes") {
  StructuredPrompt p;
  p.category = Category::Attribute;
  p.entities = {Entity{"car", {AttributeBinding{AttrKind::Color, "red"}}}};
  p.surface = "a red car";
  QuestionSet qs = decompose_questions(p);

  StubBackend stub;
  stub.answers[qs.local[0].question] = {0.9, 0.1};
  stub.answers[qs.local[1].question] = {0.2, 0.8};
  stub.answers[qs.global] = {1.0, 0.0};

  ImageScore score = score_image({}, qs, stub);
  CHECK(score.s_local == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(score.s_global == 1.0);
  CHECK(score.local_probes.size() == 2);
}

TEST_CASE("scores are invariant under question order") {
  StructuredPrompt p;
  p.category = Category::Attribute;
  p.entities = {Entity{"car",
                       {AttributeBinding{AttrKind::Color, "red"},
                        AttributeBinding{AttrKind::Texture, "shiny"}}}};
  p.surface = render(p);
  QuestionSet qs = decompose_questions(p);
  StubBackend stub;
  stub.answers[qs.local[0].question] = {0.9, 0.1};
  stub.answers[qs.local[1].question] = {0.3, 0.7};
  stub.answers[qs.local[2].question] = {0.6, 0.4};
  stub.answers[qs.global] = {0.5, 0.5};

  ImageScore a = score_image({}, qs, stub);
  QuestionSet shuffled = qs;
  std::reverse(shuffled.local.begin(), shuffled.local.end());
  ImageScore b = score_image({}, shuffled, stub);
  CHECK(a.s_local == doctest::Approx(b.s_local).epsilon(1e-15));
}

TEST_CASE("adding a question at the current mean leaves the score unchanged") {
  std::vector<ProbeResult> probes = {{0.9, 0.1}, {0.3, 0.7}};
  double mean = mean_margin(probes);
  double p_yes = (mean + 1.0) / 2.0;
  probes.push_back({p_yes, 1.0 - p_yes});
  CHECK(mean_margin(probes) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("identical images score identically in a pair") {
  SimulatorBackend sim;
  StructuredPrompt p;
  p.category = Category::Attribute;
  p.entities = {Entity{"car", {AttributeBinding{AttrKind::Color, "red"}}}};
  p.surface = render(p);
  QuestionSet qs = decompose_questions(p);
  DecodeParams decode;
  decode.seed = 8;
  ImageArtifact img = sim.generate_image(p, decode, {});
  ScoreCard card = score_pair(img, img, qs, sim, PerturbKind::Swap);
  CHECK(card.s_local_w == card.s_local_l);
  CHECK(card.s_global_w == card.s_global_l);
  CHECK(card.delta_local() == 0.0);
  CHECK(card.delta_global() == 0.0);
}

TEST_CASE("one falsified binding moves the local gap by two over the question count") {
  SimulatorBackend sim;  // eta = 0
  StructuredPrompt base;
  base.category = Category::Attribute;
  base.entities = {Entity{"car", {AttributeBinding{AttrKind::Color, "red"}}},
                   Entity{"desk", {AttributeBinding{AttrKind::Color, "blue"}}}};
  base.surface = render(base);
  QuestionSet qs = decompose_questions(base);  // 4 questions

  StructuredPrompt negative = base;
  negative.entities[0].attributes[0].value = "green";  // falsifies exactly one fact
  negative.surface = render(negative);

  DecodeParams decode;
  decode.seed = 3;
  ImageArtifact w = sim.generate_image(base, decode, {});
  ImageArtifact l = sim.generate_image(negative, decode, {});
  ScoreCard card = score_pair(w, l, qs, sim, PerturbKind::Replace);
  CHECK(card.delta_local() == doctest::Approx(2.0 / 4.0).epsilon(1e-12));
}

TEST_CASE("grounding completeness: eta-zero scores count true and false facts exactly") {
  SimulatorBackend sim;
  KeywordPools pools = builtin::pools();
  CorruptionParams corruption;
  corruption.p_omit = 0.3;
  corruption.p_wrong_attr = 0.3;
  for (Category cat : all_categories()) {
    auto prompts = generate_base_prompts(cat, 25, pools, 53);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      QuestionSet qs = decompose_questions(prompts[i]);
      DecodeParams decode;
      decode.seed = i;
      ImageArtifact img = sim.generate_image(prompts[i], decode, corruption);
      ImageScore score = score_image(img, qs, sim);
      int truths = 0;
      for (const auto& probe : score.local_probes) {
        CHECK((probe.p_yes == 1.0 || probe.p_yes == 0.0));
        if (probe.p_yes == 1.0) ++truths;
      }
      double expected = (2.0 * truths - static_cast<double>(qs.local.size())) /
                        static_cast<double>(qs.local.size());
      CHECK(score.s_local == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("score range holds over randomized transcripts") {
  Rng rng(71);
  for (int i = 0; i < 2000; ++i) {
    std::size_t n = 1 + rng.pick_index(6);
    std::vector<ProbeResult> probes;
    for (std::size_t q = 0; q < n; ++q) {
      probes.push_back({rng.next_double(), rng.next_double()});
    }
    double s = mean_margin(probes);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("score card json round-trips") {
  ScoreCard card;
  card.kind = PerturbKind::Drop;
  card.s_local_w = 0.5;
  card.s_global_w = 0.25;
  card.s_local_l = -0.5;
  card.s_global_l = 0.0;
  card.local = {{"Is there a car?", {1.0, 0.0}, {0.0, 1.0}}};
  card.global = {"global?", {0.9, 0.1}, {0.8, 0.2}};
  nlohmann::json j = card;
  ScoreCard back = j.get<ScoreCard>();
  CHECK(back.kind == card.kind);
  CHECK(back.s_local_w == card.s_local_w);
  CHECK(back.local.size() == 1);
  CHECK(back.local[0].question == card.local[0].question);
  CHECK(back.global.winning.p_yes == 0.9);
}
