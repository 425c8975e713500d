#pragma once

// Subprocess helpers for driving the command-line binary, shared by the CLI
// tests and the acceptance binary.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace clirun {

namespace fs = std::filesystem;

struct Result {
    int code = -1;
    std::string err;
};

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Runs `binary args` inside `work` with optional VAR=value prefixes in `env`.
inline Result run(const fs::path& binary, const fs::path& work, const std::string& args, const std::string& env = "") {
    const fs::path err = work / "stderr.txt";
    const std::string cmd = "cd '" + work.string() + "' && " + env + " '" + binary.string() + "' " + args + " 2> '" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

// Every regular file under `dir`, relative path -> bytes.
inline std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = slurp(e.path());
    return out;
}

}  // namespace clirun
