#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <timegci/theory.hpp>

using namespace timegci;

TEST_CASE("contrastive training recovers the toy source log-density") {
    NceCheckResult r = nce_optimality_check(7);
    INFO("r2=" << r.r2 << " slope=" << r.slope << " final_loss=" << r.final_loss);
    CHECK(r.r2 >= 0.95);
    CHECK(r.slope >= 0.9);
    CHECK(r.slope <= 1.1);
    CHECK(r.pass);
}

TEST_CASE("contrastive gradient equals the moment-matching gradient at the fixed point") {
    GradEqCheckResult r = gradient_equality_check(11);
    REQUIRE(r.coords.size() == 3);
    for (const auto& c : r.coords) {
        INFO(c.name << ": contrastive=" << c.contrastive << " moment=" << c.moment
                    << " se=" << c.se << " z=" << c.z);
        CHECK(c.z <= 3.0);
    }
    CHECK(r.pass);
}

TEST_CASE("gradient-equality estimators are not degenerate") {
    GradEqCheckResult r = gradient_equality_check(13);
    // the mu coordinate has a genuinely nonzero gradient for distinct
    // source/model parameters
    bool some_nonzero = false;
    for (const auto& c : r.coords) some_nonzero = some_nonzero || std::abs(c.moment) > 5.0 * c.se;
    CHECK(some_nonzero);
}

TEST_CASE("quality-difference diagnostic passes its two-sided check") {
    EqdCheckResult r = eqd_check(17);
    CHECK(std::abs(r.identity.estimate) <= 3.0 * r.identity.std_error);
    CHECK(r.corrupted.estimate > 3.0 * r.corrupted.std_error);
    CHECK(r.pass);
}
