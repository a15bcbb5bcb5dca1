#ifndef TPG_CORE_ERROR_HPP
#define TPG_CORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace tpg {

// Error categories surfaced by the CLI as machine-parsable codes.
enum class errc {
    config,   // invalid configuration value
    shape,    // tensor shape / dimension mismatch
    state,    // operation called in the wrong lifecycle state
    data,     // dataset ingestion / missing files
    batch,    // batch composition violates a contract
    domain,   // math domain problem (zero norm, undefined metric)
    io,       // filesystem / serialization failure
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::config: return "config";
        case errc::shape: return "shape";
        case errc::state: return "state";
        case errc::data: return "data";
        case errc::batch: return "batch";
        case errc::domain: return "domain";
        case errc::io: return "io";
    }
    return "unknown";
}

struct error : std::runtime_error {
    errc code;
    error(errc c, const std::string& msg)
        : std::runtime_error(msg), code(c) {}
};

[[noreturn]] inline void fail(errc c, const std::string& msg) {
    throw error(c, msg);
}

#define TPG_REQUIRE(cond, code, msg)          \
    do {                                      \
        if (!(cond)) ::tpg::fail(code, msg);  \
    } while (0)

}  // namespace tpg

#endif
