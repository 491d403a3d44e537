#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "logcomp/error.hpp"

namespace logcomp {

enum class Split { train, valid, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected train, valid or test)");
}

/// Round a raw vocabulary size up to the next multiple of 64.
inline int padded_vocab_size(int raw) { return (raw + 63) / 64 * 64; }

inline bool is_space_byte(unsigned char ch) {
  return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\v' || ch == '\f';
}

/// Number of maximal runs of non-whitespace bytes.
inline long long count_words(std::string_view text) {
  long long n = 0;
  bool in_word = false;
  for (unsigned char ch : text) {
    const bool space = is_space_byte(ch);
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

inline bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c >> 4) == 0xe) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c >> 3) == 0x1e) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) || cp > 0x10ffff ||
        (cp >= 0xd800 && cp <= 0xdfff)) {
      return false;
    }
    i += len;
  }
  return true;
}

/// Byte-level tokenizer (ids 0..255) or a GPT-2 style byte-pair encoder loaded
/// from a `vocab.json` + `merges.txt` pair.
///
/// The BPE pre-tokenizer splits on the same classes as GPT-2 (contractions,
/// optionally space-prefixed letter runs, digit runs, other-symbol runs,
/// whitespace) but classifies letters with ASCII rules; bytes >= 0x80 count as
/// letters.
class Tokenizer {
 public:
  static Tokenizer byte_level() { return Tokenizer{}; }

  static Tokenizer load_bpe(const std::filesystem::path& vocab_path, const std::filesystem::path& merges_path) {
    Tokenizer tok;
    tok.bpe_ = true;
    std::ifstream vin(vocab_path);
    if (!vin) throw IoError("cannot open vocab file " + vocab_path.string());
    nlohmann::json vocab;
    try {
      vin >> vocab;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid vocab file " + vocab_path.string() + ": " + e.what());
    }
    if (!vocab.is_object() || vocab.empty()) throw ConfigError("invalid vocab file: expected a non-empty object");
    int max_id = -1;
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
      if (!it.value().is_number_integer() || it.value().get<int>() < 0) {
        throw ConfigError("invalid vocab file: id for '" + it.key() + "' is not a non-negative integer");
      }
      const int id = it.value().get<int>();
      tok.encoder_[it.key()] = id;
      max_id = std::max(max_id, id);
    }
    tok.decoder_.assign(static_cast<std::size_t>(max_id) + 1, std::string{});
    for (const auto& [k, v] : tok.encoder_) tok.decoder_[static_cast<std::size_t>(v)] = k;

    std::ifstream min(merges_path);
    if (!min) throw IoError("cannot open merges file " + merges_path.string());
    std::string line;
    int rank = 0;
    while (std::getline(min, line)) {
      if (line.empty() || line.starts_with("#version")) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw ConfigError("invalid merges line: '" + line + "'");
      tok.ranks_[line.substr(0, sp) + '\x01' + line.substr(sp + 1)] = rank++;
    }
    tok.build_byte_maps();
    for (int b = 0; b < 256; ++b) {
      if (!tok.encoder_.contains(tok.byte_to_unicode_[static_cast<std::size_t>(b)])) {
        throw ConfigError("invalid vocab file: missing single-byte token for byte " + std::to_string(b));
      }
    }
    return tok;
  }

  static Tokenizer from_spec(std::string_view spec, const std::filesystem::path& vocab = {},
                             const std::filesystem::path& merges = {}) {
    if (spec == "byte") return byte_level();
    if (spec == "bpe") {
      if (vocab.empty() || merges.empty()) throw ConfigError("bpe tokenizer needs data.vocab and data.merges");
      return load_bpe(vocab, merges);
    }
    throw ConfigError("unknown tokenizer '" + std::string(spec) + "' (expected byte or bpe)");
  }

  std::string name() const { return bpe_ ? "bpe" : "byte"; }
  int raw_vocab_size() const { return bpe_ ? static_cast<int>(decoder_.size()) : 256; }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    if (!bpe_) {
      ids.reserve(text.size());
      for (unsigned char ch : text) ids.push_back(ch);
      return ids;
    }
    for (const auto& piece : pretokenize(text)) {
      std::vector<std::string> symbols;
      for (unsigned char ch : piece) symbols.push_back(byte_to_unicode_[ch]);
      merge(symbols);
      for (const auto& s : symbols) {
        const auto it = encoder_.find(s);
        if (it == encoder_.end()) throw ConfigError("bpe: symbol missing from vocab");
        ids.push_back(it->second);
      }
    }
    return ids;
  }

  std::string decode(const std::vector<std::int32_t>& ids) const {
    std::string out;
    if (!bpe_) {
      for (auto id : ids) out.push_back(static_cast<char>(id));
      return out;
    }
    for (auto id : ids) {
      const std::string& s = decoder_.at(static_cast<std::size_t>(id));
      std::size_t i = 0;
      while (i < s.size()) {
        const auto len = utf8_len(static_cast<unsigned char>(s[i]));
        out.push_back(static_cast<char>(unicode_to_byte_.at(s.substr(i, len))));
        i += len;
      }
    }
    return out;
  }

 private:
  static std::size_t utf8_len(unsigned char c) {
    if (c < 0x80) return 1;
    if ((c >> 5) == 0x6) return 2;
    if ((c >> 4) == 0xe) return 3;
    return 4;
  }

  static std::string encode_utf8(std::uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
    return s;
  }

  // GPT-2's reversible byte -> printable code point table.
  void build_byte_maps() {
    std::vector<int> printable;
    for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
    for (int b = 0xa1; b <= 0xac; ++b) printable.push_back(b);
    for (int b = 0xae; b <= 0xff; ++b) printable.push_back(b);
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
      const bool direct = std::ranges::find(printable, b) != printable.end();
      const std::uint32_t cp = direct ? static_cast<std::uint32_t>(b) : static_cast<std::uint32_t>(256 + extra++);
      byte_to_unicode_[static_cast<std::size_t>(b)] = encode_utf8(cp);
      unicode_to_byte_[byte_to_unicode_[static_cast<std::size_t>(b)]] = static_cast<unsigned char>(b);
    }
  }

  static bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }
  static bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

  static std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto cls = [&](std::size_t j) -> int {
      const auto c = static_cast<unsigned char>(text[j]);
      if (is_letter(c)) return 0;
      if (is_digit(c)) return 1;
      if (is_space_byte(c)) return 3;
      return 2;
    };
    static constexpr std::array<std::string_view, 7> kContractions{"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
    while (i < n) {
      bool matched = false;
      for (auto c : kContractions) {
        if (text.substr(i, c.size()) == c) {
          out.emplace_back(c);
          i += c.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
      std::size_t start = i;
      std::size_t j = i;
      if (text[j] == ' ' && j + 1 < n && cls(j + 1) != 3) ++j;
      const int k = cls(j);
      if (k == 3) {
        // Whitespace run; leave the last space to prefix a following word.
        std::size_t e = j;
        while (e < n && cls(e) == 3) ++e;
        if (e < n && e - j > 1 && text[e - 1] == ' ') --e;
        out.emplace_back(text.substr(start, e - start));
        i = e;
        continue;
      }
      std::size_t e = j + 1;
      while (e < n && cls(e) == k) ++e;
      out.emplace_back(text.substr(start, e - start));
      i = e;
    }
    return out;
  }

  void merge(std::vector<std::string>& symbols) const {
    while (symbols.size() > 1) {
      int best_rank = INT32_MAX;
      std::size_t best = 0;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        const auto it = ranks_.find(symbols[i] + '\x01' + symbols[i + 1]);
        if (it != ranks_.end() && it->second < best_rank) {
          best_rank = it->second;
          best = i;
        }
      }
      if (best_rank == INT32_MAX) break;
      symbols[best] += symbols[best + 1];
      symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    }
  }

  bool bpe_ = false;
  std::unordered_map<std::string, int> encoder_;
  std::vector<std::string> decoder_;
  std::unordered_map<std::string, int> ranks_;
  std::array<std::string, 256> byte_to_unicode_;
  std::map<std::string, unsigned char> unicode_to_byte_;
};

struct Corpus {
  std::vector<std::int32_t> token_ids;
  long long n_words = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return token_ids.size(); }
};

inline Corpus tokenize(std::string_view text, const Tokenizer& tokenizer, Split split = Split::train) {
  if (!is_valid_utf8(text)) throw ConfigError("input text is not valid UTF-8");
  Corpus c;
  c.token_ids = tokenizer.encode(text);
  c.n_words = count_words(text);
  c.split = split;
  return c;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read of " + path.string() + " failed");
  return ss.str();
}

inline Corpus load_corpus(const std::filesystem::path& path, const Tokenizer& tokenizer, Split split) {
  return tokenize(read_text_file(path), tokenizer, split);
}

/// One stride-m training/evaluation example.
///
/// `history` holds the (at most M) real tokens before t0, oldest first;
/// positions before the start of the corpus are absent and act as zero
/// embeddings. `inputs`/`targets`/`mask` always have length m; a final
/// partial window is padded with id 0 and mask 0.
struct Batch {
  long long t0 = 0;
  std::vector<std::int32_t> history;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;

  int n_targets() const {
    return static_cast<int>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }
};

/// Number of stride-m windows needed to score every token 1..T-1 once.
inline std::size_t window_count(std::size_t corpus_len, int m) {
  require(m >= 1, "window size m must be >= 1");
  if (corpus_len < 2) return 0;
  return (corpus_len - 1 + static_cast<std::size_t>(m) - 1) / static_cast<std::size_t>(m);
}

inline Batch window_at(const std::vector<std::int32_t>& ids, std::size_t index, int m, int M) {
  require(m >= 1, "window size m must be >= 1");
  require(M >= 0, "history length M must be >= 0");
  const std::size_t T = ids.size();
  const std::size_t t0 = index * static_cast<std::size_t>(m);
  require(t0 + 1 < T, "window index " + std::to_string(index) + " past end of corpus");
  Batch b;
  b.t0 = static_cast<long long>(t0);
  const std::size_t hist_begin = t0 > static_cast<std::size_t>(M) ? t0 - static_cast<std::size_t>(M) : 0;
  b.history.assign(ids.begin() + static_cast<std::ptrdiff_t>(hist_begin), ids.begin() + static_cast<std::ptrdiff_t>(t0));
  b.inputs.assign(static_cast<std::size_t>(m), 0);
  b.targets.assign(static_cast<std::size_t>(m), 0);
  b.mask.assign(static_cast<std::size_t>(m), 0);
  for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
    if (t0 + j + 1 >= T) break;
    b.inputs[j] = ids[t0 + j];
    b.targets[j] = ids[t0 + j + 1];
    b.mask[j] = 1;
  }
  return b;
}

inline std::vector<Batch> windows(const Corpus& corpus, int m, int M) {
  require(corpus.size() >= 2, "corpus needs at least 2 tokens to form a window");
  const std::size_t n = window_count(corpus.size(), m);
  std::vector<Batch> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(window_at(corpus.token_ids, i, m, M));
  return out;
}

/// Windows per optimizer step for a token budget.
inline int windows_per_step(long long tokens_per_step, int m) {
  require(tokens_per_step >= 1, "tokens_per_step must be >= 1");
  return static_cast<int>((tokens_per_step + m - 1) / m);
}

}  // namespace logcomp
