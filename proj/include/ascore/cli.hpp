#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "ascore/llm_gateway.hpp"
#include "ascore/workspace.hpp"

namespace ascore::cli {

/// Runs one ascore invocation; `args` excludes the program name. Returns the
/// process exit code: 0 success, 1 domain error, 2 usage or I/O error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Gateway over the named backend ("mock" or "http") with the workspace's
/// gateway settings.
std::unique_ptr<llm::Gateway> make_gateway(const workspace::Config& config,
                                           const std::string& backend,
                                           double mock_noise = 0.0);

}  // namespace ascore::cli
