#include "crpo/retrieval.hpp"

#include "crpo/error.hpp"
#include "crpo/util.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cwctype>
#include <fstream>
#include <locale.h>
#include <sstream>

namespace crpo {

namespace {

locale_t utf8_ctype() {
  static const locale_t loc = [] {
    locale_t l = newlocale(LC_CTYPE_MASK, "C.UTF-8", static_cast<locale_t>(0));
    if (l == static_cast<locale_t>(0)) {
      spdlog::warn("C.UTF-8 locale unavailable; tokenizer falls back to ASCII classes");
    }
    return l;
  }();
  return loc;
}

// Decodes one code point starting at text[i]; returns U+FFFD on malformed input.
char32_t decode_utf8(std::string_view text, std::size_t& i) {
  const auto byte = [&](std::size_t j) { return static_cast<unsigned char>(text[j]); };
  const unsigned char c = byte(i);
  int extra = 0;
  char32_t cp = 0;
  if (c < 0x80) {
    ++i;
    return c;
  } else if ((c & 0xE0) == 0xC0) {
    extra = 1;
    cp = c & 0x1F;
  } else if ((c & 0xF0) == 0xE0) {
    extra = 2;
    cp = c & 0x0F;
  } else if ((c & 0xF8) == 0xF0) {
    extra = 3;
    cp = c & 0x07;
  } else {
    ++i;
    return 0xFFFD;
  }
  if (i + extra >= text.size()) {
    i = text.size();
    return 0xFFFD;
  }
  for (int n = 1; n <= extra; ++n) {
    const unsigned char cc = byte(i + n);
    if ((cc & 0xC0) != 0x80) {
      i += n;
      return 0xFFFD;
    }
    cp = (cp << 6) | (cc & 0x3F);
  }
  i += extra + 1;
  return cp;
}

void encode_utf8(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

bool is_alnum(char32_t cp, locale_t loc) {
  if (cp < 0x80) return std::isalnum(static_cast<unsigned char>(cp)) != 0;
  if (cp == 0xFFFD || loc == static_cast<locale_t>(0)) return false;
  return iswalnum_l(static_cast<wint_t>(cp), loc) != 0;
}

char32_t to_lower(char32_t cp, locale_t loc) {
  if (cp < 0x80) return static_cast<char32_t>(std::tolower(static_cast<unsigned char>(cp)));
  if (loc == static_cast<locale_t>(0)) return cp;
  return static_cast<char32_t>(towlower_l(static_cast<wint_t>(cp), loc));
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  const locale_t loc = utf8_ctype();
  std::vector<std::string> terms;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    const char32_t cp = decode_utf8(text, i);
    if (is_alnum(cp, loc)) {
      encode_utf8(to_lower(cp, loc), current);
    } else if (!current.empty()) {
      terms.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) terms.push_back(std::move(current));
  return terms;
}

double Bm25Index::idf(std::size_t df) const {
  const double n = static_cast<double>(doc_count());
  const double d = static_cast<double>(df);
  return std::log((n - d + 0.5) / (d + 0.5) + 1.0);
}

double bm25_term_score(double idf, double tf, double doc_length, double avg_doc_length,
                       const Bm25Params& params) {
  const double norm = params.k1 * (1.0 - params.b + params.b * doc_length / avg_doc_length);
  return idf * (tf * (params.k1 + 1.0)) / (tf + norm);
}

Bm25Index build_index(const Corpus& corpus, const Bm25Params& params) {
  if (corpus.empty()) throw EmptyCorpus("cannot index an empty corpus");
  Bm25Index index;
  index.params = params;
  index.corpus_hash = corpus.content_hash();
  const auto docs = corpus.unique_prompt_representatives();
  index.doc_lengths.reserve(docs.size());
  index.doc_ids.reserve(docs.size());
  std::uint64_t total_length = 0;
  for (std::size_t ordinal = 0; ordinal < docs.size(); ++ordinal) {
    const auto& record = corpus[docs[ordinal]];
    const auto terms = tokenize(record.prompt_text);
    index.doc_ids.push_back(record.id);
    index.doc_lengths.push_back(static_cast<std::uint32_t>(terms.size()));
    total_length += terms.size();
    std::unordered_map<std::string_view, std::uint32_t> tf;
    std::vector<std::string_view> first_seen;
    for (const auto& t : terms) {
      if (tf[t]++ == 0) first_seen.push_back(t);
    }
    for (auto t : first_seen) {
      index.postings[std::string(t)].push_back({static_cast<std::uint32_t>(ordinal), tf[t]});
    }
  }
  index.avg_doc_length = static_cast<double>(total_length) / static_cast<double>(docs.size());
  return index;
}

void require_top_k(std::size_t k) {
  if (k < kMinTopK) {
    throw KTooSmall("k=" + std::to_string(k) + " is below the minimum of " +
                    std::to_string(kMinTopK) + " (we require k >= 5 so every metric has a candidate)");
  }
}

RetrievedSet retrieve(const Bm25Index& index, std::string_view query, std::size_t k) {
  require_top_k(k);
  const auto terms = tokenize(query);
  if (terms.empty()) throw EmptyQuery("query has no indexable terms");

  const std::size_t n = index.doc_count();
  std::vector<double> scores(n, 0.0);
  std::vector<char> matched(n, 0);
  for (const auto& term : terms) {
    auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const double idf = index.idf(it->second.size());
    for (const Posting& p : it->second) {
      scores[p.doc] += bm25_term_score(idf, p.tf, index.doc_lengths[p.doc], index.avg_doc_length,
                                       index.params);
      matched[p.doc] = 1;
    }
  }

  std::vector<std::uint32_t> hits;
  for (std::uint32_t d = 0; d < n; ++d) {
    if (matched[d] && scores[d] > 0.0) hits.push_back(d);
  }
  if (hits.size() < kMinTopK) {
    throw InsufficientCandidates("only " + std::to_string(hits.size()) +
                                 " documents match the query; at least " +
                                 std::to_string(kMinTopK) + " are required");
  }
  const std::size_t take = std::min(k, hits.size());
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take), hits.end(),
                    before);

  RetrievedSet out;
  out.query = std::string(query);
  out.k = k;
  out.shortfall = take < k;
  out.entries.reserve(take);
  for (std::size_t r = 0; r < take; ++r) {
    const auto d = hits[r];
    out.entries.push_back({index.doc_ids[d], d, scores[d], r + 1});
  }
  return out;
}

namespace {

constexpr char kIndexMagic[8] = {'C', 'R', 'P', 'O', 'B', 'M', '2', '5'};

template <typename T>
void put(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_string(std::ostream& out, std::string_view s) {
  put(out, static_cast<std::uint64_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get_value(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw CacheError("truncated index cache");
  return value;
}

std::string get_string(std::istream& in) {
  const auto size = get_value<std::uint64_t>(in);
  if (size > (1ULL << 32)) throw CacheError("corrupt index cache (string length)");
  std::string s(size, '\0');
  in.read(s.data(), static_cast<std::streamsize>(size));
  if (!in) throw CacheError("truncated index cache");
  return s;
}

}  // namespace

void save_index(const Bm25Index& index, const std::filesystem::path& path) {
  std::ostringstream out(std::ios::binary);
  out.write(kIndexMagic, sizeof(kIndexMagic));
  put(out, kIndexCacheVersion);
  put(out, index.corpus_hash);
  put(out, index.params.k1);
  put(out, index.params.b);
  put(out, static_cast<std::uint64_t>(index.doc_count()));
  for (std::size_t d = 0; d < index.doc_count(); ++d) {
    put(out, index.doc_lengths[d]);
    put_string(out, index.doc_ids[d]);
  }
  put(out, index.avg_doc_length);
  std::vector<const std::string*> terms;
  terms.reserve(index.postings.size());
  for (const auto& [term, _] : index.postings) terms.push_back(&term);
  std::sort(terms.begin(), terms.end(), [](auto* a, auto* b) { return *a < *b; });
  put(out, static_cast<std::uint64_t>(terms.size()));
  for (const auto* term : terms) {
    put_string(out, *term);
    const auto& list = index.postings.at(*term);
    put(out, static_cast<std::uint64_t>(list.size()));
    for (const auto& p : list) {
      put(out, p.doc);
      put(out, p.tf);
    }
  }
  write_file_atomic(path, out.str());
}

Bm25Index load_index(const std::filesystem::path& path, std::uint64_t expected_corpus_hash,
                     const Bm25Params& expected_params) {
  std::istringstream in(read_file(path), std::ios::binary);
  char magic[sizeof(kIndexMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) {
    throw CacheError("not an index cache: " + path.string());
  }
  const auto version = get_value<std::uint32_t>(in);
  if (version != kIndexCacheVersion) {
    throw CacheError("index cache version mismatch: found " + std::to_string(version) +
                     ", expected " + std::to_string(kIndexCacheVersion));
  }
  Bm25Index index;
  index.corpus_hash = get_value<std::uint64_t>(in);
  index.params.k1 = get_value<double>(in);
  index.params.b = get_value<double>(in);
  if (index.corpus_hash != expected_corpus_hash) throw CacheError("index cache built for another corpus");
  if (!(index.params == expected_params)) throw CacheError("index cache built with other BM25 params");

  const auto docs = get_value<std::uint64_t>(in);
  if (docs > (1ULL << 32)) throw CacheError("corrupt index cache (doc count)");
  index.doc_lengths.reserve(docs);
  index.doc_ids.reserve(docs);
  for (std::uint64_t d = 0; d < docs; ++d) {
    index.doc_lengths.push_back(get_value<std::uint32_t>(in));
    index.doc_ids.push_back(get_string(in));
  }
  index.avg_doc_length = get_value<double>(in);
  const auto term_count = get_value<std::uint64_t>(in);
  for (std::uint64_t t = 0; t < term_count; ++t) {
    auto term = get_string(in);
    const auto n = get_value<std::uint64_t>(in);
    if (n > docs) throw CacheError("corrupt index cache (posting count)");
    std::vector<Posting> list;
    list.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      Posting p;
      p.doc = get_value<std::uint32_t>(in);
      p.tf = get_value<std::uint32_t>(in);
      if (p.doc >= docs) throw CacheError("corrupt index cache (doc ordinal)");
      list.push_back(p);
    }
    index.postings.emplace(std::move(term), std::move(list));
  }
  return index;
}

std::filesystem::path index_cache_path(const std::filesystem::path& cache_dir,
                                       std::uint64_t corpus_hash, const Bm25Params& params) {
  std::ostringstream name;
  name << "bm25-" << to_hex(corpus_hash) << "-k1_" << params.k1 << "-b_" << params.b << ".idx";
  return cache_dir / name.str();
}

Bm25Index load_or_build_index(const Corpus& corpus, const Bm25Params& params,
                              const std::optional<std::filesystem::path>& cache_dir) {
  if (!cache_dir) return build_index(corpus, params);
  const auto hash = corpus.content_hash();
  const auto path = index_cache_path(*cache_dir, hash, params);
  if (std::filesystem::exists(path)) {
    try {
      return load_index(path, hash, params);
    } catch (const CacheError& e) {
      spdlog::warn("ignoring index cache: {}", e.what());
    }
  }
  auto index = build_index(corpus, params);
  save_index(index, path);
  return index;
}

}  // namespace crpo
