#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowsr/tensor.hpp"

using flowsr::ShapeError;
using flowsr::Tensor;

TEST_CASE("construction fills and reports shape") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.defined());
    CHECK(t.ndim() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    for (double v : t.vec()) CHECK(v == 1.5);
}

TEST_CASE("from_data validates element count") {
    Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(t.vec()[3] == 4);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("non-positive dimensions are rejected") {
    CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({-1}), ShapeError);
}

TEST_CASE("copies are shallow, clone is deep") {
    Tensor a({4}, 0.0);
    Tensor b = a;  // shares the buffer
    CHECK(a.id() == b.id());
    b.vec()[2] = 7.0;
    CHECK(a.vec()[2] == 7.0);

    Tensor c = a.clone();
    CHECK(c.id() != a.id());
    c.vec()[0] = -1.0;
    CHECK(a.vec()[0] == 0.0);
    CHECK(c.same_shape(a));
}

TEST_CASE("item works only for single-element tensors") {
    CHECK(Tensor::scalar(2.25).item() == 2.25);
    Tensor t({3}, 0.0);
    CHECK_THROWS_AS(t.item(), ShapeError);
}

TEST_CASE("requires_grad is a per-handle flag, default off") {
    Tensor a({2}, 0.0);
    CHECK_FALSE(a.requires_grad());
    a.set_requires_grad(true);
    CHECK(a.requires_grad());
}

TEST_CASE("4d element access uses row-major [B,C,H,W]") {
    Tensor t({2, 3, 4, 5});
    t.at4(1, 2, 3, 4) = 42.0;
    // last element of the buffer
    CHECK(t.vec().back() == 42.0);
    CHECK(t.offset4(0, 0, 0, 1) == 1);
    CHECK(t.offset4(0, 0, 1, 0) == 5);
    CHECK(t.offset4(0, 1, 0, 0) == 20);
    CHECK(t.offset4(1, 0, 0, 0) == 60);
}

TEST_CASE("dim validates the axis index") {
    Tensor t({2, 3});
    CHECK_THROWS_AS(t.dim(2), ShapeError);
    CHECK_THROWS_AS(t.dim(-1), ShapeError);
}
