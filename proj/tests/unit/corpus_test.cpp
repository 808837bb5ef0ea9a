#include "crpo/corpus.hpp"
#include "crpo/error.hpp"
#include "crpo/util.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

namespace crpo {
namespace {

using testing::fixture_path;
using testing::TempDir;

TEST(CorpusIngest, RejectsOutOfRangeRowAndKeepsTheRest) {
  const auto result = ingest(fixture_path("three_rows.jsonl"), Split::Train);
  ASSERT_EQ(result.corpus.size(), 2u);
  ASSERT_EQ(result.rejected.size(), 1u);
  EXPECT_EQ(result.rejected[0].line_no, 2u);
  EXPECT_NE(result.rejected[0].reason.find("helpfulness"), std::string::npos);
  EXPECT_EQ(result.non_blank_lines, 3u);
  // Row indices count the rejected line, so ids stay tied to file position.
  EXPECT_EQ(result.corpus[0].id, "train:0");
  EXPECT_EQ(result.corpus[1].id, "train:2");
  EXPECT_EQ(result.corpus.split_counts().at(Split::Train), 2u);
}

TEST(CorpusIngest, EmptyFileThrows) {
  EXPECT_THROW(ingest(fixture_path("empty.jsonl"), Split::Train), EmptyCorpus);
}

TEST(CorpusIngest, MissingFileThrows) {
  EXPECT_THROW(ingest(fixture_path("does_not_exist.jsonl"), Split::Train), FileNotFound);
}

TEST(CorpusIngest, OnlyBlankAndInvalidLinesThrow) {
  EXPECT_THROW(ingest_text("\n\n  \n{\"prompt\": 3}\n", Split::Train), EmptyCorpus);
}

TEST(CorpusIngest, SourceHashIsHashOfFileBytes) {
  const auto path = fixture_path("three_rows.jsonl");
  const auto result = ingest(path, Split::Train);
  EXPECT_EQ(result.corpus.source_hash(), fnv1a64(read_file(path)));
}

TEST(CorpusParse, IntegralFloatsAreAccepted) {
  std::string prompt, response;
  MetricScores s;
  const auto err = parse_row(
      R"({"prompt":"p","response":"r","helpfulness":3.0,"correctness":0,"coherence":4.0,"complexity":1,"verbosity":2})",
      prompt, response, s);
  ASSERT_FALSE(err.has_value()) << *err;
  EXPECT_EQ(s[Metric::Helpfulness], 3);
  EXPECT_EQ(s[Metric::Coherence], 4);
}

TEST(CorpusParse, RejectsBadRows) {
  std::string prompt, response;
  MetricScores s;
  const std::vector<std::string> bad = {
      "not json",
      "[1,2,3]",
      R"({"response":"r","helpfulness":1,"correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"  ","response":"r","helpfulness":1,"correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"p","response":7,"helpfulness":1,"correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"p","response":"r","helpfulness":2.5,"correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"p","response":"r","helpfulness":-1,"correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"p","response":"r","helpfulness":"3","correctness":1,"coherence":1,"complexity":1,"verbosity":1})",
      R"({"prompt":"p","response":"r","helpfulness":1,"correctness":1,"coherence":1,"complexity":1})",
  };
  for (const auto& line : bad) {
    EXPECT_TRUE(parse_row(line, prompt, response, s).has_value()) << line;
  }
}

TEST(CorpusGet, LooksUpById) {
  const auto corpus = ingest(fixture_path("three_rows.jsonl"), Split::Train).corpus;
  const auto& first = get(corpus, "train:0");
  EXPECT_EQ(first.prompt_text, "Summarize the causes of the French Revolution");
  EXPECT_EQ(first.scores, testing::scores_of(3, 3, 4, 2, 2));
  EXPECT_THROW(get(corpus, "train:99"), UnknownId);
  EXPECT_THROW(get(corpus, "train:1"), UnknownId);
}

TEST(CorpusGet, RoundTripsEveryRecord) {
  const auto corpus = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  for (const auto& record : corpus.records()) {
    EXPECT_EQ(get(corpus, record.id), record);
    EXPECT_EQ(corpus[*corpus.ordinal_of(record.id)], record);
  }
}

TEST(CorpusResolve, SingleRowReturnsItsScores) {
  std::vector<PromptRecord> records = {testing::make_record(0, "only", testing::scores_of(3, 3, 3, 3, 3))};
  const Corpus corpus(Split::Train, std::move(records));
  EXPECT_EQ(resolve_scores(corpus, "only"), testing::scores_of(3, 3, 3, 3, 3));
}

TEST(CorpusResolve, PicksHighestAverageAmongDuplicates) {
  const auto corpus = ingest(fixture_path("duplicate_prompts.jsonl"), Split::Train).corpus;
  EXPECT_EQ(resolve_scores(corpus, "Name three primary colors"), testing::scores_of(4, 4, 3, 3, 2));
  EXPECT_EQ(corpus[corpus.representative("Name three primary colors")].id, "train:2");
  EXPECT_THROW(resolve_scores(corpus, "Name four primary colors"), NoMatch);
}

TEST(CorpusResolve, TiesGoToLowestRowIndex) {
  std::vector<PromptRecord> records = {
      testing::make_record(0, "other", testing::scores_of(1, 1, 1, 1, 1)),
      testing::make_record(1, "same", testing::scores_of(4, 0, 0, 0, 0)),
      testing::make_record(2, "same", testing::scores_of(0, 0, 0, 0, 4)),
  };
  const Corpus corpus(Split::Train, std::move(records));
  EXPECT_EQ(corpus[corpus.representative("same")].id, "train:1");
  const auto reps = corpus.unique_prompt_representatives();
  ASSERT_EQ(reps.size(), 2u);
  EXPECT_EQ(corpus[reps[0]].id, "train:0");
  EXPECT_EQ(corpus[reps[1]].id, "train:1");
}

TEST(Corpus, DuplicateIdsAreRejected) {
  std::vector<PromptRecord> records = {testing::make_record(0, "a", {}), testing::make_record(0, "b", {})};
  EXPECT_THROW(Corpus(Split::Train, std::move(records)), ConfigError);
}

TEST(Corpus, CopiesKeepWorkingLookups) {
  Corpus copy;
  {
    const auto original = ingest(fixture_path("duplicate_prompts.jsonl"), Split::Train).corpus;
    copy = original;
  }
  EXPECT_EQ(copy.get("train:1").prompt_text, "Describe a sunset");
  EXPECT_EQ(copy[copy.representative("Name three primary colors")].id, "train:2");
}

TEST(Corpus, IngestIsDeterministic) {
  const auto a = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  const auto b = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.content_hash(), b.content_hash());
}

TEST(CorpusCache, RoundTrip) {
  TempDir dir;
  const auto corpus = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  const auto path = corpus_cache_path(dir.path(), corpus.source_hash(), Split::Train);
  save_corpus_cache(corpus, path);
  const auto loaded = load_corpus_cache(path, corpus.source_hash());
  EXPECT_EQ(loaded, corpus);
  EXPECT_EQ(loaded.source_hash(), corpus.source_hash());
}

TEST(CorpusCache, StaleHashIsRejected) {
  TempDir dir;
  const auto corpus = ingest(fixture_path("three_rows.jsonl"), Split::Train).corpus;
  const auto path = dir / "c.jsonl";
  save_corpus_cache(corpus, path);
  EXPECT_THROW(load_corpus_cache(path, corpus.source_hash() + 1), CacheError);
}

TEST(CorpusCache, VersionMismatchIsRejected) {
  TempDir dir;
  const auto corpus = ingest(fixture_path("three_rows.jsonl"), Split::Train).corpus;
  const auto path = dir / "c.jsonl";
  save_corpus_cache(corpus, path);
  auto text = read_file(path);
  const auto pos = text.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 11, "\"version\":2");
  write_file_atomic(path, text);
  EXPECT_THROW(load_corpus_cache(path), CacheError);
}

TEST(CorpusCache, TruncatedFileIsRejected) {
  TempDir dir;
  const auto corpus = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  const auto path = dir / "c.jsonl";
  save_corpus_cache(corpus, path);
  const auto text = read_file(path);
  write_file_atomic(path, text.substr(0, text.size() / 2));
  EXPECT_THROW(load_corpus_cache(path), CacheError);
}

TEST(CorpusCache, LoadOrIngestReusesCache) {
  TempDir dir;
  const auto source = dir / "train.jsonl";
  write_file_atomic(source, read_file(fixture_path("three_rows.jsonl")));
  const auto first = load_or_ingest(source, Split::Train, dir.path());
  const auto cache = corpus_cache_path(dir.path(), first.source_hash(), Split::Train);
  ASSERT_TRUE(std::filesystem::exists(cache));
  EXPECT_EQ(load_or_ingest(source, Split::Train, dir.path()), first);

  // Changing the source bytes selects a different cache entry.
  write_file_atomic(source, read_file(fixture_path("duplicate_prompts.jsonl")));
  const auto second = load_or_ingest(source, Split::Train, dir.path());
  EXPECT_EQ(second.size(), 3u);
  EXPECT_NE(second.source_hash(), first.source_hash());
}

// Set CRPO_HELPSTEER2_TRAIN to the downloaded train.jsonl to run.
TEST(CorpusIngest, FullHelpSteer2TrainFile) {
  const char* path = std::getenv("CRPO_HELPSTEER2_TRAIN");
  if (path == nullptr) GTEST_SKIP() << "CRPO_HELPSTEER2_TRAIN not set";
  const auto result = ingest(path, Split::Train);
  EXPECT_EQ(result.corpus.size() + result.rejected.size(), result.non_blank_lines);
  EXPECT_GE(result.corpus.size(), 20250u);
  EXPECT_LE(result.corpus.size(), 20350u);
}

}  // namespace
}  // namespace crpo
