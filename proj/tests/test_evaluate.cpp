#include "spillover/evaluate.hpp"

#include <doctest.h>

#include <algorithm>
#include <stdexcept>

using namespace spillover;

TEST_CASE("aic arithmetic") {
    CHECK(aic(0.0, 0) == 0.0);
    CHECK(aic(-100.0, 3) == 206.0);
    CHECK(aic(-50.0, 4) - aic(-50.0, 3) == 2.0);
    CHECK_THROWS_AS(aic(0.0, -1), std::invalid_argument);
    const auto r = make_report("m", -12.5, 2, 30.0);
    CHECK(r.aic == 29.0);
    CHECK(r.dic == 30.0);
}

TEST_CASE("ranking by likelihood and by aic") {
    auto ranked = rank_models({make_report("a", -10.0, 5), make_report("b", -20.0, 1)});
    CHECK(ranked[0].ll_rank == 1);
    CHECK(ranked[1].ll_rank == 2);
    CHECK(ranked[0].aic_rank == 1);

    ranked = rank_models({make_report("big", -10.0, 3), make_report("small", -10.0, 2)});
    CHECK(ranked[0].aic_rank == 2);
    CHECK(ranked[1].aic_rank == 1);
    CHECK(ranked[1].ll_rank == 1);

    ranked = rank_models({make_report("z", -5.0, 2), make_report("y", -5.0, 2)});
    CHECK(ranked[0].ll_rank == 2);
    CHECK(ranked[1].ll_rank == 1);

    // a small LL gain does not pay for two extra parameters
    ranked = rank_models({make_report("rich", -99.5, 6), make_report("lean", -100.0, 4)});
    CHECK(ranked[0].ll_rank == 1);
    CHECK(ranked[0].aic_rank == 2);

    CHECK_THROWS_AS(rank_models({make_report("only", -1.0, 1)}), std::invalid_argument);
}

TEST_CASE("ranks form a permutation") {
    std::vector<FitReport> reports;
    for (int k = 0; k < 9; ++k) reports.push_back(make_report("m" + std::to_string(k), -100.0 + (k % 4), k % 3));
    const auto ranked = rank_models(reports);
    std::vector<int> ll, a;
    for (const auto& r : ranked) {
        ll.push_back(r.ll_rank);
        a.push_back(r.aic_rank);
    }
    std::sort(ll.begin(), ll.end());
    std::sort(a.begin(), a.end());
    for (int k = 0; k < 9; ++k) {
        CHECK(ll[static_cast<std::size_t>(k)] == k + 1);
        CHECK(a[static_cast<std::size_t>(k)] == k + 1);
    }
}

TEST_CASE("rank table and csv layout") {
    auto a = make_report("hier A", -10.0, 3);
    a.learning_rule = "hier-simple";
    a.utility = "A";
    auto b = make_report("pool A", -12.0, 3);
    b.learning_rule = "pooling";
    b.utility = "A";
    const auto ranked = rank_models({a, b});
    const auto md = rank_table_markdown(ranked, {"pooling", "hier-simple"}, {"S", "A"});
    CHECK(md == "| LL/AIC | pooling | hier-simple |\n|---|---|---|\n| S | - | - |\n| A | 2/2 | 1/1 |\n");
    const auto csv = reports_csv(ranked);
    CHECK(csv.rfind("label,learning_rule,utility,neg_loglik,num_parameters,aic,dic,ll_rank,aic_rank\n", 0) == 0);
    CHECK(csv.find("hier A,hier-simple,A,10,3,26,,1,1\n") != std::string::npos);
}
