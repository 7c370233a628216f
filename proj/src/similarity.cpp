#include "textret/similarity.hpp"

#include <algorithm>
#include <fstream>

namespace textret {

std::vector<std::string> split_utf8(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (lead < 0x80) len = 1;
    else if ((lead >> 5) == 0x6) len = 2;
    else if ((lead >> 4) == 0xE) len = 3;
    else if ((lead >> 3) == 0x1E) len = 4;
    else throw InvalidInput("invalid UTF-8 lead byte");
    if (i + len > text.size()) throw InvalidInput("truncated UTF-8 sequence");
    for (std::size_t k = 1; k < len; ++k)
      if ((static_cast<unsigned char>(text[i + k]) >> 6) != 0x2) throw InvalidInput("invalid UTF-8 continuation byte");
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

namespace {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Charset::Charset(std::vector<std::string> symbols, bool fold_case)
    : symbols_(std::move(symbols)), fold_case_(fold_case) {
  if (symbols_.empty()) throw InvalidInput("charset must be non-empty");
  std::uint64_t h = fnv1a(fold_case_ ? "fold" : "exact");
  for (int i = 0; i < size(); ++i) {
    const auto& s = symbols_[static_cast<std::size_t>(i)];
    if (split_utf8(s).size() != 1) throw InvalidInput("charset symbol must be one code point: '" + s + "'");
    if (!lookup_.emplace(fold(s), i).second) throw InvalidInput("duplicate charset symbol '" + s + "'");
    h = fnv1a(s, fnv1a("\n", h));
  }
  id_ = h;
}

Charset Charset::latin_lower_digits() {
  std::vector<std::string> symbols;
  for (char c = 'a'; c <= 'z'; ++c) symbols.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) symbols.emplace_back(1, c);
  return Charset(std::move(symbols), true);
}

Charset Charset::load(const std::filesystem::path& path, bool fold_case) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read charset file " + path.string());
  std::vector<std::string> symbols;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    symbols.push_back(line);
  }
  return Charset(std::move(symbols), fold_case);
}

void Charset::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write charset file " + path.string());
  for (const auto& s : symbols_) out << s << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

const std::string& Charset::symbol(int index) const {
  if (index < 0 || index >= size()) throw InvalidInput("symbol index out of range");
  return symbols_[static_cast<std::size_t>(index)];
}

std::string Charset::fold(std::string_view symbol) const {
  std::string s(symbol);
  if (fold_case_ && s.size() == 1 && s[0] >= 'A' && s[0] <= 'Z') s[0] = static_cast<char>(s[0] - 'A' + 'a');
  return s;
}

std::optional<int> Charset::index_of(std::string_view symbol) const {
  auto it = lookup_.find(fold(symbol));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

Word Charset::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& cp : split_utf8(text)) {
    auto idx = index_of(cp);
    if (!idx) throw InvalidInput("symbol '" + cp + "' is not in the charset");
    ids.push_back(*idx);
  }
  if (ids.empty()) throw InvalidInput("word must be non-empty");
  return Word(std::move(ids), id_);
}

bool Charset::contains(std::string_view text) const {
  try {
    encode(text);
    return true;
  } catch (const InvalidInput&) {
    return false;
  }
}

std::string Charset::decode(const Word& word) const {
  if (word.charset_id() != id_) throw InvalidInput("word was encoded with a different charset");
  std::string out;
  for (int id : word.ids()) out += symbol(id);
  return out;
}

Word::Word(std::vector<int> ids, std::uint64_t charset_id) : ids_(std::move(ids)), charset_id_(charset_id) {
  if (ids_.empty()) throw InvalidInput("word must be non-empty");
  for (int id : ids_)
    if (id < 0) throw InvalidInput("negative symbol index");
}

int levenshtein(const Word& a, const Word& b) {
  if (a.charset_id() != b.charset_id()) throw InvalidInput("levenshtein: words use different charsets");
  const auto& x = a.ids();
  const auto& y = b.ids();
  std::vector<int> prev(y.size() + 1), cur(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= y.size(); ++j) {
      const int sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

double normalized_similarity(const Word& a, const Word& b) {
  const int d = levenshtein(a, b);
  return 1.0 - static_cast<double>(d) / std::max(a.size(), b.size());
}

SimilarityMatrix target_matrix(const std::vector<Word>& rows, const std::vector<Word>& cols, const Charset* charset) {
  if (rows.empty() || cols.empty()) throw InvalidInput("target_matrix: empty word list");
  SimilarityMatrix m;
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j)
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normalized_similarity(rows[i], cols[j]);
  auto label = [&](const Word& w, std::size_t i) { return charset ? charset->decode(w) : std::to_string(i); };
  for (std::size_t i = 0; i < rows.size(); ++i) m.row_labels.push_back(label(rows[i], i));
  for (std::size_t j = 0; j < cols.size(); ++j) m.col_labels.push_back(label(cols[j], j));
  return m;
}

}  // namespace textret
