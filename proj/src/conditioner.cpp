// SPDX-License-Identifier: Apache-2.0
#include "texforce/conditioner.hpp"

#include <fstream>
#include <sstream>

#include "texforce/toy_world.hpp"

namespace texforce {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw Error("vocabulary: duplicate token " + tokens_[i]);
}

Vocabulary Vocabulary::from_grammar() {
  std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<unk>", "<empty>"};
  for (auto& w : grammar_words()) tokens.push_back(w);
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary: " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  if (tokens.size() <= kEmpty) throw Error("vocabulary file is missing special tokens");
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary: " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::string normalize_prompt(const std::string& text) {
  std::istringstream in(text);
  std::string out;
  for (std::string w; in >> w;) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

TokenizedPrompt tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens) {
  if (max_tokens < 2) throw Error("max_tokens must be >= 2");
  TokenizedPrompt out;
  out.ids.assign(static_cast<std::size_t>(max_tokens), Vocabulary::kPad);
  std::istringstream in(normalize_prompt(text));
  std::vector<int> body;
  for (std::string w; in >> w;) body.push_back(vocab.id(w));
  const std::size_t room = static_cast<std::size_t>(max_tokens - 2);
  if (body.size() > room) {
    body.resize(room);
    out.truncated = true;
  }
  out.ids[0] = Vocabulary::kBos;
  for (std::size_t i = 0; i < body.size(); ++i) out.ids[i + 1] = body[i];
  out.ids[body.size() + 1] = Vocabulary::kEos;
  out.length = static_cast<int>(body.size()) + 2;
  return out;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kEmpty)
      continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::vector<std::string> encoder_linear_layers(const EncoderConfig& config) {
  std::vector<std::string> out;
  for (int b = 0; b < config.blocks; ++b) {
    const std::string pre = "encoder.block" + std::to_string(b) + ".";
    for (const char* n : {"attn.q", "attn.k", "attn.v", "attn.o", "ff1", "ff2"}) out.push_back(pre + n);
  }
  return out;
}

}  // namespace texforce
