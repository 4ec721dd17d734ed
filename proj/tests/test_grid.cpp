#include <doctest.h>

#include <limits>

#include <algorithm>

#include "caq/grid.hpp"

using namespace caq;

TEST_SUITE("grid") {
    TEST_CASE("linear index is x-fastest") {
        const GridDims d{3, 4, 5, 1.0};
        CHECK(linear_index(0, 0, 0, d) == 0);
        CHECK(linear_index(1, 0, 0, d) == 1);
        CHECK(linear_index(0, 1, 0, d) == 3);
        CHECK(linear_index(0, 0, 1, d) == 12);
        CHECK(linear_index(2, 3, 4, d) == 59);
        for (std::size_t n = 0; n < d.size(); ++n) {
            const Voxel v = voxel_coords(n, d);
            CHECK(linear_index(v.i, v.j, v.k, d) == n);
        }
    }

    TEST_CASE("out-of-range coordinates throw") {
        const GridDims d{2, 2, 2, 1.0};
        CHECK_THROWS_AS(linear_index(2, 0, 0, d), BoundsError);
        CHECK_THROWS_AS(voxel_coords(8, d), BoundsError);
    }

    TEST_CASE("grid validation") {
        CHECK_THROWS_AS(GridDims({0, 1, 1, 1.0}).validate(), ConfigError);
        CHECK_THROWS_AS(GridDims({1, 1, 1, 0.0}).validate(), ConfigError);
        CHECK_NOTHROW(GridDims({1, 1, 1, 2.0}).validate());
        CHECK_THROWS_AS(Volume(GridDims{2, 2, 2, 1.0}, std::vector<double>(7)), ConfigError);
    }

    TEST_CASE("volume access") {
        Volume v(GridDims{2, 3, 4, 1.0}, 0.5);
        v.at(1, 2, 3) = 7.0;
        CHECK(v[23] == 7.0);
        CHECK(v.all_finite());
        v[0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_FALSE(v.all_finite());
    }

    TEST_CASE("tissue names round trip") {
        for (const auto& [code, name] : default_class_table()) {
            CHECK(static_cast<std::uint8_t>(tissue_from_name(name)) == code);
        }
        CHECK_THROWS_AS(tissue_from_name("bone"), ConfigError);
        CHECK_THROWS_AS(TissueMap(GridDims{1, 1, 2, 1.0}, {0, 9}), ConfigError);
    }

    TEST_CASE("default time grid") {
        const TimeGrid t;
        REQUIRE(t.size() == TimeGrid::kCount);
        CHECK(t[0] == 0.0);
        CHECK(t[15] == 30.0);
        CHECK(t[16] == 35.0);
        CHECK(t[21] == 60.0);
        CHECK_THROWS_AS(TimeGrid({0.0, 2.0, 2.0}), ConfigError);
    }

    TEST_CASE("neighbors in fixed order without wrap-around") {
        const GridDims d{3, 3, 3, 1.0};
        const auto centre = neighbors(linear_index(1, 1, 1, d), d);
        const std::vector<std::size_t> expect{linear_index(0, 1, 1, d), linear_index(2, 1, 1, d),
                                              linear_index(1, 0, 1, d), linear_index(1, 2, 1, d),
                                              linear_index(1, 1, 0, d), linear_index(1, 1, 2, d)};
        CHECK(centre == expect);
        CHECK(neighbors(0, d).size() == 3);
        CHECK(neighbors(linear_index(1, 1, 0, d), d).size() == 5);
    }

    TEST_CASE("tissue restriction drops other classes") {
        const GridDims d{3, 1, 1, 1.0};
        const TissueMap t(d, {1, 1, 2});
        CHECK(neighbors(1, d, &t, true) == std::vector<std::size_t>{0});
        CHECK(neighbors(2, d, &t, true).empty());
        CHECK(neighbors(1, d, &t, false).size() == 2);
        CHECK_THROWS_AS(neighbors(1, d, nullptr, true), ConfigError);
    }
}
