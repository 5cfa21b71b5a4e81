#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

#include "ascore/errors.hpp"
#include "ascore/featurizer.hpp"
#include "ascore/llm_gateway.hpp"
#include "ascore/util.hpp"
#include "prompt_tags.hpp"

namespace ascore::llm {

namespace {

std::optional<std::string> between(const std::string& text, const std::string& open,
                                   const std::string& close) {
  const auto start = text.find(open);
  if (start == std::string::npos) return std::nullopt;
  const auto body = start + open.size();
  const auto end = text.rfind(close);
  if (end == std::string::npos || end < body) return std::nullopt;
  return text.substr(body, end - body);
}

std::vector<std::string> tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool is_content(const std::string& w) { return w.size() >= 4; }

// Phrases ranked by how many responses use them: word trigrams bounded by
// content words first, then bigrams, then single content words.
std::vector<std::string> ranked_phrases(const std::vector<std::string>& responses) {
  std::vector<std::string> ranked;
  for (int width : {3, 2, 1}) {
    std::map<std::string, int> df;
    for (const auto& r : responses) {
      const auto toks = tokens(r);
      std::set<std::string> in_response;
      for (std::size_t i = 0; i + static_cast<std::size_t>(width) <= toks.size(); ++i) {
        const auto& first = toks[i];
        const auto& last = toks[i + static_cast<std::size_t>(width) - 1];
        if (!is_content(first) || !is_content(last)) continue;
        std::string phrase = first;
        for (int w = 1; w < width; ++w) phrase += " " + toks[i + static_cast<std::size_t>(w)];
        in_response.insert(phrase);
      }
      for (const auto& p : in_response) ++df[p];
    }
    std::vector<std::pair<std::string, int>> items(df.begin(), df.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    for (const auto& [phrase, count] : items) ranked.push_back(phrase);
  }
  return ranked;
}

// Greedy pick that skips phrases sharing a content word with a chosen one.
std::vector<std::string> pick_components(const std::vector<std::string>& ranked,
                                         std::size_t skip, std::size_t cap) {
  std::vector<std::string> chosen;
  std::set<std::string> used_words;
  std::size_t skipped = 0;
  for (const auto& phrase : ranked) {
    if (chosen.size() == cap) break;
    const auto words = tokens(phrase);
    bool overlaps = false;
    for (const auto& w : words) {
      if (is_content(w) && used_words.count(w)) overlaps = true;
    }
    if (overlaps) continue;
    for (const auto& w : words) {
      if (is_content(w)) used_words.insert(w);
    }
    if (skipped < skip) {
      ++skipped;
      continue;
    }
    chosen.push_back(phrase);
  }
  for (std::size_t i = chosen.size(); i < cap; ++i) {
    chosen.push_back("unspecified claim " + std::to_string(i + 1));
  }
  return chosen;
}

std::string answer_extraction(const std::string& prompt) {
  const std::string tag = prompt_tags::kExtractExactly;
  const auto pos = prompt.find(tag);
  const int cap = std::atoi(prompt.c_str() + pos + tag.size());
  if (cap < 1) throw ProtocolError("mock: cannot read the component count");

  std::size_t part_no = 1;
  if (const auto p = prompt.find(prompt_tags::kPartOf); p != std::string::npos) {
    part_no = static_cast<std::size_t>(
        std::max(1, std::atoi(prompt.c_str() + p + std::string(prompt_tags::kPartOf).size())));
  }

  std::vector<std::string> responses;
  if (auto block = between(prompt, prompt_tags::kResponsesOpen, prompt_tags::kResponsesClose)) {
    std::istringstream in(*block);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] != '[') continue;
      const auto close = line.find("] ");
      if (close != std::string::npos) responses.push_back(line.substr(close + 2));
    }
  }
  const auto chosen = pick_components(ranked_phrases(responses),
                                      (part_no - 1) * static_cast<std::size_t>(cap),
                                      static_cast<std::size_t>(cap));
  std::string out = "Here are the analytic components:\n";
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    out += std::to_string(i + 1) + ". " + chosen[i] + "\n";
  }
  return out;
}

}  // namespace

std::string MockBackend::complete(const CompletionRequest& request) {
  std::string prompt;
  for (const auto& m : request.messages) {
    if (m.role == "user") prompt += m.content;
  }
  if (prompt.find(prompt_tags::kExtractExactly) != std::string::npos) {
    return answer_extraction(prompt);
  }

  const auto response = between(prompt, prompt_tags::kResponseOpen, prompt_tags::kResponseClose);
  const auto comp_open = prompt.find(prompt_tags::kComponentOpen);
  if (!response || comp_open == std::string::npos) {
    throw ProtocolError("mock backend does not recognize this prompt");
  }
  // First closing tag: the response block follows the component block.
  const auto comp_start = comp_open + std::string(prompt_tags::kComponentOpen).size();
  const auto comp_end = prompt.find(prompt_tags::kComponentClose, comp_start);
  if (comp_end == std::string::npos) {
    throw ProtocolError("mock backend does not recognize this prompt");
  }
  const std::string component_text = prompt.substr(comp_start, comp_end - comp_start);

  int label = featurizer::to_int(featurizer::mock_label_rule(*response, component_text));
  if (noise_ > 0.0) {
    const std::uint64_t h = splitmix64(std::stoull(cache_key(request).substr(0, 16), nullptr, 16));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    if (u < noise_) label = (label + 1 + static_cast<int>(h & 1)) % 3;
  }

  static constexpr const char* kVerdict[] = {
      "The response does not express this component.",
      "The response expresses part of this component.",
      "The response states this component directly."};
  std::ostringstream out;
  out << "Comparing the response with the component \"" << component_text << "\". "
      << kVerdict[label] << "\n"
      << prompt_tags::kLabelMarker << " " << label;
  return out.str();
}

}  // namespace ascore::llm
