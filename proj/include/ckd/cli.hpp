#pragma once

namespace ckd {

// Entry point behind main(). Exit codes: 0 success, 2 configuration or
// validation problem, 3 runtime training failure.
int run_cli(int argc, char** argv);

}  // namespace ckd
