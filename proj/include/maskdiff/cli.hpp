#pragma once

namespace maskdiff {

// Full command-line surface. Returns the process exit code: 0 success,
// 1 failed checks, 2 usage or config error, 3 data error, 4 numeric failure.
int run_cli(int argc, char** argv);

}  // namespace maskdiff
