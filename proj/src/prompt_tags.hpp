#pragma once

// Section markers shared by the prompt builders and the mock backend, which
// reads prompts back to answer them offline.

namespace ascore::prompt_tags {

inline constexpr const char* kResponsesOpen = "<responses>";
inline constexpr const char* kResponsesClose = "</responses>";
inline constexpr const char* kExtractExactly = "Extract exactly ";
inline constexpr const char* kPartOf = "(part ";

inline constexpr const char* kComponentOpen = "<component>\n";
inline constexpr const char* kComponentClose = "\n</component>";
inline constexpr const char* kResponseOpen = "<response>\n";
inline constexpr const char* kResponseClose = "\n</response>";

inline constexpr const char* kLabelMarker = "LABEL:";

}  // namespace ascore::prompt_tags
