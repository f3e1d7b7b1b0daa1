#include "wamd/version.hpp"

namespace wamd {

const char* tool_version() { return WAMD_VERSION; }

}  // namespace wamd
