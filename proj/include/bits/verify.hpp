#pragma once

#include <string>
#include <vector>

namespace bits {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyReport {
    std::vector<CheckResult> checks;
    bool all_pass = true;

    std::string table() const;
};

// Runs the oracle suites: finite-difference gradient checks at both
// precisions, the eigen-route coding-rate oracle, spectral identities, the
// brute-force retrieval and kNN oracles, and the entropy/MI estimator
// oracles. `inject_fault` is a test hook; "logdet-grad-sign" flips the
// coding-rate gradient so the suite must report a failure.
VerifyReport run_verification(const std::string& inject_fault = "");

}  // namespace bits
