#pragma once

namespace wamd {

/// Release string of this build, written into every output directory.
const char* tool_version();

}  // namespace wamd
