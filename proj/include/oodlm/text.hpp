#pragma once

// Tokenization, vocabulary, JSONL ingestion, batching, and synthetic Markov
// corpora (an in-distribution grammar, a permuted-row out-of-distribution
// grammar, and a mixed "pretraining" corpus).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "oodlm/common.hpp"

namespace oodlm {

enum class Label { ID, OOD };

inline std::string label_str(Label l) { return l == Label::ID ? "id" : "ood"; }

inline Label parse_label(const std::string& s) {
  if (s == "id") return Label::ID;
  if (s == "ood") return Label::OOD;
  throw ParseError("label must be \"id\" or \"ood\", got \"" + s + "\"");
}

// ---------------------------------------------------------------------------
// Vocabulary

enum class TokenizerMode { Whitespace, Char };

inline TokenizerMode parse_tokenizer_mode(const std::string& s) {
  if (s == "whitespace") return TokenizerMode::Whitespace;
  if (s == "char") return TokenizerMode::Char;
  throw ConfigError("tokenizer mode must be \"whitespace\" or \"char\", got \"" +
                    s + "\"");
}

inline std::string tokenizer_mode_str(TokenizerMode m) {
  return m == TokenizerMode::Whitespace ? "whitespace" : "char";
}

inline std::vector<std::string> tokenize(const std::string& text,
                                         TokenizerMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::Whitespace) {
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) out.push_back(tok);
  } else {
    out.reserve(text.size());
    for (char c : text) out.emplace_back(1, c);
  }
  return out;
}

class Vocab {
public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;

  Vocab() = default;

  // Tokens in id order, reserved entries first, then corpus tokens by first
  // occurrence.  Deterministic function of (corpus, mode).
  static Vocab build(const std::vector<std::string>& corpus,
                     TokenizerMode mode) {
    if (corpus.empty())
      throw UsageError("build_vocab: corpus must be non-empty");
    Vocab v;
    v.mode_ = mode;
    for (const auto& text : corpus)
      for (const auto& tok : tokenize(text, mode))
        if (!v.index_.count(tok)) {
          v.index_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
          v.tokens_.push_back(tok);
        }
    return v;
  }

  // Reconstructs a vocab from a serialized token list (checkpoint loading).
  static Vocab from_tokens(std::vector<std::string> tokens,
                           TokenizerMode mode) {
    if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" ||
        tokens[2] != "<eos>" || tokens[3] != "<unk>")
      throw LoadError("vocab token list must begin with the four reserved "
                      "tokens <pad> <bos> <eos> <unk>");
    Vocab v;
    v.mode_ = mode;
    v.tokens_.clear();
    v.index_.clear();
    for (const auto& tok : tokens) {
      if (v.index_.count(tok))
        throw LoadError("vocab token list contains duplicate \"" + tok + "\"");
      v.index_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
      v.tokens_.push_back(tok);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token_of(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw UsageError("Vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool operator==(const Vocab& o) const {
    return mode_ == o.mode_ && tokens_ == o.tokens_;
  }

private:
  TokenizerMode mode_ = TokenizerMode::Whitespace;
  std::vector<std::string> tokens_{"<pad>", "<bos>", "<eos>", "<unk>"};
  std::unordered_map<std::string, std::int32_t> index_{
      {"<pad>", kPad}, {"<bos>", kBos}, {"<eos>", kEos}, {"<unk>", kUnk}};
};

// ---------------------------------------------------------------------------
// Encoding

struct EncodedExample {
  std::vector<std::int32_t> ids;  // BOS ... EOS, truncated to max_len
  std::string text;
  std::optional<Label> label;
};

// Wraps in BOS/EOS, maps unknown tokens to UNK, truncates to max_len while
// keeping the head of the sequence plus the closing EOS.
inline EncodedExample encode(const std::string& text, const Vocab& vocab,
                             std::size_t max_len,
                             std::optional<Label> label = std::nullopt) {
  if (max_len < 2) throw UsageError("encode: max_len must be at least 2");
  EncodedExample ex;
  ex.text = text;
  ex.label = label;
  ex.ids.push_back(Vocab::kBos);
  for (const auto& tok : tokenize(text, vocab.mode()))
    ex.ids.push_back(vocab.id_of(tok));
  ex.ids.push_back(Vocab::kEos);
  if (ex.ids.size() > max_len) {
    ex.ids.resize(max_len);
    ex.ids.back() = Vocab::kEos;
  }
  return ex;
}

// Inverse of encode for in-vocab text: drops reserved tokens and joins with
// the mode's separator.
inline std::string decode(const std::vector<std::int32_t>& ids,
                          const Vocab& vocab) {
  std::string out;
  bool first = true;
  for (std::int32_t id : ids) {
    if (id == Vocab::kPad || id == Vocab::kBos || id == Vocab::kEos) continue;
    const std::string& tok = vocab.token_of(id);
    if (vocab.mode() == TokenizerMode::Whitespace && !first) out += ' ';
    out += tok;
    first = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

struct RawExample {
  std::string text;
  std::optional<Label> label;
};

// Newline-delimited records {"text": ..., "label"?: "id"|"ood"}; order
// preserved; malformed lines reported with their 1-based line number.
inline std::vector<RawExample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<RawExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": record must be an object with a string \"text\" "
                       "field");
    RawExample ex;
    ex.text = j["text"].get<std::string>();
    if (j.contains("label")) {
      if (!j["label"].is_string())
        throw ParseError(path + ":" + std::to_string(lineno) +
                         ": \"label\" must be a string");
      try {
        ex.label = parse_label(j["label"].get<std::string>());
      } catch (const ParseError& e) {
        throw ParseError(path + ":" + std::to_string(lineno) + ": " +
                         e.what());
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<EncodedExample> load_jsonl(const std::string& path,
                                              const Vocab& vocab,
                                              std::size_t max_len) {
  std::vector<EncodedExample> out;
  for (const auto& raw : read_jsonl(path))
    out.push_back(encode(raw.text, vocab, max_len, raw.label));
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::size_t rows = 0;                // sequences
  std::size_t cols = 0;                // padded length
  std::vector<std::int32_t> ids;       // rows x cols, right-padded with PAD
  std::vector<std::uint8_t> mask;      // 1 where a real token sits
  std::vector<std::size_t> lengths;    // true lengths per sequence
};

inline Batch pack_batch(const std::vector<EncodedExample>& examples,
                        std::size_t begin, std::size_t end) {
  Batch b;
  b.rows = end - begin;
  for (std::size_t i = begin; i < end; ++i)
    b.cols = std::max(b.cols, examples[i].ids.size());
  b.ids.assign(b.rows * b.cols, Vocab::kPad);
  b.mask.assign(b.rows * b.cols, 0);
  b.lengths.resize(b.rows);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& ids = examples[begin + r].ids;
    b.lengths[r] = ids.size();
    for (std::size_t c = 0; c < ids.size(); ++c) {
      b.ids[r * b.cols + c] = ids[c];
      b.mask[r * b.cols + c] = 1;
    }
  }
  return b;
}

inline Batch single_batch(const EncodedExample& example) {
  return pack_batch({example}, 0, 1);
}

// Deterministic shuffle per (seed, epoch), then fixed-size chunks (the last
// batch may be smaller).  Every example appears exactly once.
inline std::vector<Batch> make_batches(const std::vector<EncodedExample>& examples,
                                       std::size_t batch_size,
                                       std::uint64_t seed,
                                       std::uint64_t epoch = 0) {
  if (examples.empty())
    throw UsageError("make_batches: examples must be non-empty");
  if (batch_size == 0)
    throw UsageError("make_batches: batch_size must be positive");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix64(seed, epoch));
  rng.shuffle(order);
  std::vector<EncodedExample> shuffled;
  shuffled.reserve(examples.size());
  for (std::size_t i : order) shuffled.push_back(examples[i]);
  std::vector<Batch> out;
  for (std::size_t begin = 0; begin < shuffled.size(); begin += batch_size)
    out.push_back(pack_batch(shuffled, begin,
                             std::min(begin + batch_size, shuffled.size())));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic Markov corpora

struct MarkovGrammar {
  std::vector<std::string> states;
  std::vector<double> transition;  // n x n row-stochastic, row-major
  std::vector<double> start;       // distribution over initial states
  std::size_t len_min = 3;
  std::size_t len_max = 12;

  void validate() const {
    const std::size_t n = states.size();
    if (n == 0) throw UsageError("MarkovGrammar: no states");
    if (transition.size() != n * n)
      throw UsageError("MarkovGrammar: transition matrix must be n x n");
    if (start.size() != n)
      throw UsageError("MarkovGrammar: start distribution size mismatch");
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (transition[i * n + j] < 0.0)
          throw UsageError("MarkovGrammar: negative transition probability");
        s += transition[i * n + j];
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw UsageError("MarkovGrammar: row " + std::to_string(i) +
                         " sums to " + std::to_string(s) + ", expected 1");
    }
    double s = 0.0;
    for (double p : start) {
      if (p < 0.0) throw UsageError("MarkovGrammar: negative start probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9)
      throw UsageError("MarkovGrammar: start distribution must sum to 1");
    if (len_min < 3) throw UsageError("MarkovGrammar: len_min must be >= 3");
    if (len_max < len_min)
      throw UsageError("MarkovGrammar: len_max must be >= len_min");
  }
};

namespace detail {

inline std::size_t sample_categorical(Rng& rng, const double* probs,
                                      std::size_t n) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return n - 1;  // guard against floating-point shortfall
}

}  // namespace detail

inline std::vector<std::string> gen_markov_corpus(const MarkovGrammar& g,
                                                  std::size_t n,
                                                  std::uint64_t seed) {
  g.validate();
  const std::size_t ns = g.states.size();
  Rng rng(seed);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len =
        g.len_min + rng.below(g.len_max - g.len_min + 1);
    std::size_t s = detail::sample_categorical(rng, g.start.data(), ns);
    std::string text = g.states[s];
    for (std::size_t t = 1; t < len; ++t) {
      s = detail::sample_categorical(rng, g.transition.data() + s * ns, ns);
      text += ' ';
      text += g.states[s];
    }
    out.push_back(std::move(text));
  }
  return out;
}

// --- Default grammar family over a shared alphabet -------------------------

inline std::vector<std::string> letter_alphabet(std::size_t n) {
  if (n == 0 || n > 26) throw UsageError("letter_alphabet: n must be in 1..26");
  std::vector<std::string> states;
  for (std::size_t i = 0; i < n; ++i)
    states.emplace_back(1, static_cast<char>('a' + i));
  return states;
}

// Banded chain: state i steps to i+offset (mod n) with the paired probability.
inline MarkovGrammar banded_grammar(std::vector<std::string> states,
                                    const std::vector<std::size_t>& offsets,
                                    const std::vector<double>& probs,
                                    std::size_t len_min, std::size_t len_max) {
  if (offsets.size() != probs.size() || offsets.empty())
    throw UsageError("banded_grammar: offsets and probs must pair up");
  const std::size_t n = states.size();
  MarkovGrammar g;
  g.states = std::move(states);
  g.transition.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < offsets.size(); ++k)
      g.transition[i * n + (i + offsets[k]) % n] += probs[k];
  g.start.assign(n, 1.0 / static_cast<double>(n));
  g.len_min = len_min;
  g.len_max = len_max;
  g.validate();
  return g;
}

// Same rows, addressed through the fixed derangement i -> (i + shift) mod n.
// Column sums (hence token marginals under the uniform start) are unchanged;
// only the sequential structure moves.
inline MarkovGrammar permute_rows(const MarkovGrammar& g, std::size_t shift) {
  const std::size_t n = g.states.size();
  if (n < 2 || shift % n == 0)
    throw UsageError("permute_rows: shift must be a nonzero rotation");
  MarkovGrammar out = g;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = (i + shift) % n;
    for (std::size_t j = 0; j < n; ++j)
      out.transition[i * n + j] = g.transition[src * n + j];
  }
  out.validate();
  return out;
}

inline MarkovGrammar id_grammar(std::size_t n_symbols, std::size_t len_min,
                                std::size_t len_max) {
  return banded_grammar(letter_alphabet(n_symbols), {1, 2, 3}, {0.6, 0.3, 0.1},
                        len_min, len_max);
}

inline MarkovGrammar ood_grammar(std::size_t n_symbols, std::size_t len_min,
                                 std::size_t len_max) {
  return permute_rows(id_grammar(n_symbols, len_min, len_max),
                      std::max<std::size_t>(1, n_symbols / 2));
}

inline MarkovGrammar uniform_grammar(std::size_t n_symbols,
                                     std::size_t len_min,
                                     std::size_t len_max) {
  auto states = letter_alphabet(n_symbols);
  MarkovGrammar g;
  const std::size_t n = states.size();
  g.states = std::move(states);
  g.transition.assign(n * n, 1.0 / static_cast<double>(n));
  g.start.assign(n, 1.0 / static_cast<double>(n));
  g.len_min = len_min;
  g.len_max = len_max;
  g.validate();
  return g;
}

inline MarkovGrammar reverse_band_grammar(std::size_t n_symbols,
                                          std::size_t len_min,
                                          std::size_t len_max) {
  const std::size_t n = n_symbols;
  return banded_grammar(letter_alphabet(n), {n - 1, n - 2, n - 3},
                        {0.6, 0.3, 0.1}, len_min, len_max);
}

inline MarkovGrammar skip_band_grammar(std::size_t n_symbols,
                                       std::size_t len_min,
                                       std::size_t len_max) {
  return banded_grammar(letter_alphabet(n_symbols), {4, 7, 11},
                        {0.5, 0.3, 0.2}, len_min, len_max);
}

// --- Pretraining mixture ----------------------------------------------------

struct MixtureComponent {
  std::string name;
  MarkovGrammar grammar;
  double weight = 0.0;
};

struct PretrainCorpus {
  std::vector<std::string> texts;
  std::vector<std::string> source;  // component name per text
};

// Draws n sequences from a weighted mixture of grammars.  Component counts
// follow the exact largest-remainder apportionment of the weights, so the
// per-grammar proportions are identical for every seed; the seed only moves
// the individual sequences and the interleaving order.
inline PretrainCorpus gen_pretrain_corpus(
    const std::vector<MixtureComponent>& components, std::size_t n,
    std::uint64_t seed) {
  if (components.empty())
    throw UsageError("gen_pretrain_corpus: mixture must be non-empty");
  double total_w = 0.0;
  for (const auto& c : components) {
    if (c.weight < 0.0)
      throw UsageError("gen_pretrain_corpus: negative mixture weight for " +
                       c.name);
    total_w += c.weight;
  }
  if (total_w <= 0.0)
    throw UsageError("gen_pretrain_corpus: mixture weights sum to zero");
  if (n == 0) throw UsageError("gen_pretrain_corpus: n must be positive");

  // Largest-remainder apportionment of n over the weights.
  std::vector<std::size_t> counts(components.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < components.size(); ++i) {
    const double exact =
        static_cast<double>(n) * components[i].weight / total_w;
    counts[i] = static_cast<std::size_t>(exact);
    assigned += counts[i];
    remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned)
    ++counts[remainders[r % remainders.size()].second];

  PretrainCorpus out;
  out.texts.reserve(n);
  out.source.reserve(n);
  for (std::size_t i = 0; i < components.size(); ++i) {
    auto texts = gen_markov_corpus(components[i].grammar, counts[i],
                                   mix64(seed, i + 1));
    for (auto& t : texts) {
      out.texts.push_back(std::move(t));
      out.source.push_back(components[i].name);
    }
  }
  std::vector<std::size_t> order(out.texts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix64(seed, 0x9d1cb3u));
  rng.shuffle(order);
  PretrainCorpus shuffled;
  shuffled.texts.reserve(n);
  shuffled.source.reserve(n);
  for (std::size_t i : order) {
    shuffled.texts.push_back(std::move(out.texts[i]));
    shuffled.source.push_back(std::move(out.source[i]));
  }
  return shuffled;
}

}  // namespace oodlm
