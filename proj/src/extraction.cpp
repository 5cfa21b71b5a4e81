#include "ascore/extraction.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <future>
#include <set>
#include <sstream>

#include "ascore/errors.hpp"
#include "ascore/util.hpp"
#include "prompt_tags.hpp"

namespace ascore::extraction {

using nlohmann::json;

std::optional<std::size_t> ComponentSet::position(
    const std::string& component_id) const {
  for (std::size_t i = 0; i < components.size(); ++i) {
    if (components[i].id == component_id) return i;
  }
  return std::nullopt;
}

std::string ComponentSet::digest() const {
  json canonical = json::array();
  for (const auto& c : components) {
    canonical.push_back(json::array({c.id, c.part, c.text}));
  }
  return sha256_hex(json::array({"ascore-components-v1", item_id, canonical})
                        .dump(-1, ' ', false, json::error_handler_t::replace));
}

json to_json(const ComponentSet& set) {
  json comps = json::array();
  for (const auto& c : set.components) {
    comps.push_back({{"id", c.id},
                     {"part", c.part},
                     {"index", c.index},
                     {"text", c.text},
                     {"provenance", c.provenance}});
  }
  return {{"item_id", set.item_id},
          {"created_at", set.created_at},
          {"backend", set.backend},
          {"model_name", set.model_name},
          {"components", comps}};
}

ComponentSet component_set_from_json(const json& j) {
  try {
    ComponentSet set;
    set.item_id = j.at("item_id").get<std::string>();
    set.created_at = j.value("created_at", "");
    set.backend = j.value("backend", "");
    set.model_name = j.value("model_name", "");
    std::set<std::string> ids;
    for (const auto& c : j.at("components")) {
      AnalyticComponent comp;
      comp.id = c.at("id").get<std::string>();
      comp.item_id = set.item_id;
      comp.part = c.at("part").get<std::string>();
      comp.index = c.at("index").get<int>();
      comp.text = c.at("text").get<std::string>();
      comp.provenance = c.value("provenance", "");
      if (comp.text.empty()) throw ExtractionError("component " + comp.id + " has empty text");
      if (!ids.insert(comp.id).second) {
        throw ExtractionError("duplicate component id " + comp.id);
      }
      set.components.push_back(std::move(comp));
    }
    return set;
  } catch (const json::exception& e) {
    throw ExtractionError(std::string("malformed component store: ") + e.what());
  }
}

ComponentSet load_component_set(const std::filesystem::path& path) {
  try {
    return component_set_from_json(json::parse(read_text_file(path)));
  } catch (const json::parse_error& e) {
    throw ExtractionError(path.string() + ": " + e.what());
  }
}

void save_component_set(const std::filesystem::path& path, const ComponentSet& set) {
  write_text_file_atomic(path, to_json(set).dump(2) + "\n");
}

std::vector<std::size_t> sample_for_prompt(std::span<const std::string> texts,
                                           const PromptOptions& options) {
  const std::size_t n = texts.size();
  std::vector<std::size_t> by_length(n);
  for (std::size_t i = 0; i < n; ++i) by_length[i] = i;
  std::stable_sort(by_length.begin(), by_length.end(),
                   [&](std::size_t a, std::size_t b) {
                     return texts[a].size() < texts[b].size();
                   });

  // Picks per tercile, evenly spaced within it.
  std::vector<std::vector<std::size_t>> strata(3);
  const std::size_t want = std::min(n, options.sample_size);
  std::array<std::size_t, 3> size{}, quota{};
  std::size_t assigned = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    size[t] = n * (t + 1) / 3 - n * t / 3;
    quota[t] = std::min(size[t], want / 3 + (t < want % 3 ? 1 : 0));
    assigned += quota[t];
  }
  // Hand quota that a small tercile cannot use to the others.
  for (std::size_t t = 0; t < 3 && assigned < want; ++t) {
    const std::size_t extra = std::min(size[t] - quota[t], want - assigned);
    quota[t] += extra;
    assigned += extra;
  }
  for (std::size_t t = 0; t < 3; ++t) {
    const std::size_t lo = n * t / 3;
    const std::size_t m = size[t];
    for (std::size_t j = 0; j < quota[t]; ++j) {
      const std::size_t offset = (2 * j + 1) * m / (2 * quota[t]);
      strata[t].push_back(by_length[lo + offset]);
    }
  }

  // Round-robin over the strata while the budget allows.
  std::vector<std::size_t> chosen;
  std::size_t used = 0;
  bool progress = true;
  for (std::size_t round = 0; progress; ++round) {
    progress = false;
    for (const auto& stratum : strata) {
      if (round >= stratum.size()) continue;
      progress = true;
      const std::size_t idx = stratum[round];
      if (used + texts[idx].size() > options.char_budget && !chosen.empty()) {
        continue;
      }
      used += texts[idx].size();
      chosen.push_back(idx);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

llm::CompletionRequest build_extraction_prompt(const dataset::Item& item,
                                               std::span<const std::string> texts,
                                               const std::string& part, int cap,
                                               const llm::GatewayConfig& config,
                                               const PromptOptions& options) {
  if (texts.empty()) throw UsageError("extraction needs at least one response");
  if (cap < 1) throw UsageError("component cap must be >= 1");

  std::size_t part_no = 0;
  for (std::size_t i = 0; i < item.parts.size(); ++i) {
    if (item.parts[i].name == part) part_no = i + 1;
  }
  if (part_no == 0) throw UsageError("item " + item.id + " has no part '" + part + "'");

  const auto sample = sample_for_prompt(texts, options);
  std::ostringstream user;
  if (!item.prompt_text.empty()) {
    user << "Assessment item:\n<item_prompt>\n" << item.prompt_text
         << "\n</item_prompt>\n\n";
  }
  if (item.parts.size() > 1) {
    user << "Scoring part: " << part << " " << prompt_tags::kPartOf << part_no
         << " of " << item.parts.size()
         << "). Only extract components relevant to this part.\n\n";
  }
  user << "Student responses (" << sample.size() << " shown):\n"
       << prompt_tags::kResponsesOpen << "\n";
  for (std::size_t i = 0; i < sample.size(); ++i) {
    user << "[" << (i + 1) << "] " << texts[sample[i]] << "\n";
  }
  user << prompt_tags::kResponsesClose << "\n\n"
       << prompt_tags::kExtractExactly << cap
       << " analytic components from these responses.\n"
       << "Requirements:\n"
       << "- Each component states one claim, statement or argument that "
          "students make explicitly.\n"
       << "- Each component is atomic: never join two independent claims in "
          "one component.\n"
       << "- Prefer claims that recur across many responses, so the list is "
          "representative of the whole set.\n"
       << "- Include claims regardless of whether they are correct.\n"
       << "- Write each component as a short declarative sentence.\n\n"
       << "Answer with a numbered list of exactly " << cap
       << " lines, formatted as \"1. <component>\", and nothing else.";

  llm::CompletionRequest req;
  req.model_name = config.extractor_model;
  req.temperature = config.extractor_temperature;
  req.max_tokens = config.max_tokens;
  req.messages = {
      {"system",
       "You analyze student answers to a short-answer assessment item and "
       "identify the analytic components they contain."},
      {"user", user.str()}};
  return req;
}

namespace {

// Returns the entry text when `line` starts with a list marker.
std::optional<std::string> list_entry(std::string_view line) {
  line = trim(line);
  if (line.empty()) return std::nullopt;
  std::size_t pos = 0;
  if (std::isdigit(static_cast<unsigned char>(line[0]))) {
    while (pos < line.size() && std::isdigit(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos >= line.size() || (line[pos] != '.' && line[pos] != ')' && line[pos] != ':')) {
      return std::nullopt;
    }
    ++pos;
  } else if (line[0] == '-' || line[0] == '*' || line[0] == '+') {
    pos = 1;
  } else if (line.rfind("\xE2\x80\xA2", 0) == 0) {  // U+2022 bullet
    pos = 3;
  } else {
    return std::nullopt;
  }
  if (pos < line.size() && !std::isspace(static_cast<unsigned char>(line[pos]))) {
    return std::nullopt;
  }
  std::string_view rest = trim(line.substr(pos));
  // Markdown emphasis and wrapping quotes.
  while (rest.size() >= 4 && rest.substr(0, 2) == "**" &&
         rest.substr(rest.size() - 2) == "**") {
    rest = trim(rest.substr(2, rest.size() - 4));
  }
  if (rest.size() >= 2 && rest.front() == '"' && rest.back() == '"') {
    rest = trim(rest.substr(1, rest.size() - 2));
  }
  if (rest.empty()) return std::nullopt;
  return std::string(rest);
}

}  // namespace

std::vector<std::string> parse_component_list(const std::string& text, int cap) {
  std::vector<std::string> entries;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto entry = list_entry(line)) entries.push_back(std::move(*entry));
  }
  if (static_cast<int>(entries.size()) != cap) {
    throw ExtractionParseError("expected " + std::to_string(cap) +
                               " list entries, found " +
                               std::to_string(entries.size()));
  }
  return entries;
}

ComponentSet extract_components(const dataset::Item& item,
                                std::span<const std::string> texts,
                                llm::Gateway& gateway,
                                const ExtractOptions& options) {
  item.validate();
  if (texts.empty()) throw UsageError("extraction needs at least one response");
  if (options.cap && *options.cap < 1) throw UsageError("component cap must be >= 1");

  auto run_part = [&](const dataset::PartSpec& part) {
    const int cap = options.cap.value_or(part.cap);
    auto request = build_extraction_prompt(item, texts, part.name, cap,
                                           gateway.config(), options.prompt);
    std::string last_error;
    for (int attempt = 0; attempt < options.parse_attempts; ++attempt) {
      request.sample_index = attempt;
      const auto result = gateway.complete(request);
      try {
        return parse_component_list(result.text, cap);
      } catch (const ExtractionParseError& e) {
        last_error = e.what();
      }
    }
    throw ExtractionError("item " + item.id + " part '" + part.name +
                          "': no parseable component list after " +
                          std::to_string(options.parse_attempts) +
                          " attempts (" + last_error + ")");
  };

  std::vector<std::future<std::vector<std::string>>> futures;
  for (const auto& part : item.parts) {
    futures.push_back(std::async(std::launch::async, run_part, std::cref(part)));
  }

  ComponentSet set;
  set.item_id = item.id;
  set.created_at = now_iso8601();
  set.backend = llm::to_string(gateway.backend_kind());
  set.model_name = gateway.config().extractor_model;
  int next_id = 1;
  // Collect every future before rethrowing so no thread outlives `texts`.
  std::exception_ptr failure;
  std::vector<std::vector<std::string>> per_part;
  for (auto& f : futures) {
    try {
      per_part.push_back(f.get());
    } catch (...) {
      if (!failure) failure = std::current_exception();
      per_part.emplace_back();
    }
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t p = 0; p < item.parts.size(); ++p) {
    for (std::size_t i = 0; i < per_part[p].size(); ++i) {
      AnalyticComponent c;
      c.id = "C" + std::to_string(next_id++);
      c.item_id = item.id;
      c.part = item.parts[p].name;
      c.index = static_cast<int>(i);
      c.text = per_part[p][i];
      c.provenance = "extracted";
      set.components.push_back(std::move(c));
    }
  }
  return set;
}

namespace {

int numeric_suffix(const std::string& id) {
  if (id.size() < 2 || id[0] != 'C') return 0;
  int v = 0;
  for (std::size_t i = 1; i < id.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(id[i]))) return 0;
    v = v * 10 + (id[i] - '0');
  }
  return v;
}

AnalyticComponent& find_component(ComponentSet& set, const std::string& id) {
  for (auto& c : set.components) {
    if (c.id == id) return c;
  }
  throw NotFoundError("unknown component id '" + id + "'");
}

}  // namespace

EditResult edit_component_set(const ComponentSet& set, const std::vector<Edit>& edits) {
  EditResult result{set, {}};
  ComponentSet& out = result.set;
  int next_id = 0;
  for (const auto& c : out.components) next_id = std::max(next_id, numeric_suffix(c.id));
  ++next_id;

  for (const auto& edit : edits) {
    if (const auto* add = std::get_if<AddComponent>(&edit)) {
      if (add->text.empty()) throw UsageError("added component text is empty");
      for (const auto& c : out.components) {
        if (c.text == add->text) {
          result.warnings.push_back("added text duplicates component " + c.id +
                                    ": \"" + add->text + "\"");
        }
      }
      AnalyticComponent c;
      c.id = "C" + std::to_string(next_id++);
      c.item_id = out.item_id;
      c.part = add->part;
      c.text = add->text;
      c.provenance = "added by edit";
      if (!add->note.empty()) c.provenance += ": " + add->note;
      // Keep each part contiguous: insert after the part's last component.
      auto last = std::find_if(out.components.rbegin(), out.components.rend(),
                               [&](const auto& x) { return x.part == add->part; });
      if (last == out.components.rend()) {
        out.components.push_back(std::move(c));
      } else {
        out.components.insert(last.base(), std::move(c));
      }
    } else if (const auto* rm = std::get_if<RemoveComponent>(&edit)) {
      find_component(out, rm->id);
      std::erase_if(out.components, [&](const auto& c) { return c.id == rm->id; });
    } else if (const auto* rw = std::get_if<RewriteComponent>(&edit)) {
      if (rw->text.empty()) throw UsageError("rewritten component text is empty");
      auto& c = find_component(out, rw->id);
      c.provenance = "rewritten from \"" + c.text + "\"";
      if (!rw->note.empty()) c.provenance += ": " + rw->note;
      c.text = rw->text;
    }
  }

  std::map<std::string, int> next_index;
  for (auto& c : out.components) c.index = next_index[c.part]++;
  return result;
}

Edit edit_from_json(const json& j) {
  const std::string op = j.at("op").get<std::string>();
  if (op == "add") {
    return AddComponent{j.at("part").get<std::string>(), j.at("text").get<std::string>(),
                        j.value("note", "")};
  }
  if (op == "remove") return RemoveComponent{j.at("id").get<std::string>(), j.value("note", "")};
  if (op == "rewrite") {
    return RewriteComponent{j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                            j.value("note", "")};
  }
  throw UsageError("unknown edit op '" + op + "'");
}

}  // namespace ascore::extraction
