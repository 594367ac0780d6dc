#pragma once

#include <string>
#include <vector>

namespace prefopt {

/// Entry point behind the prefopt binary. `args` excludes the program name.
/// Commands: gen-world, gen-data, fit-judges, pretrain-n2s, pretrain-s2s,
/// dpo-finetune, evaluate, ablate, report. Returns a process exit code;
/// errors are printed to stderr.
int run_cli(const std::vector<std::string>& args);

}  // namespace prefopt
