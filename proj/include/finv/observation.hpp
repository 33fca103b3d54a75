#pragma once

#include <stdexcept>

#include "finv/array.hpp"
#include "finv/camera.hpp"

namespace finv {

/// One posed, masked RGB observation. object_mask marks visible object
/// pixels; validity_mask marks trusted pixels (in-frame and unoccluded).
/// object_mask is zero wherever validity_mask is zero.
struct ObservationFrame {
    Array rgb;            // [H, W, 3] in [0,1]
    Array object_mask;    // [H, W] in {0,1}
    Array validity_mask;  // [H, W] in {0,1}
    Camera camera;
    int index = 0;

    int height() const { return rgb.shape()[0]; }
    int width() const { return rgb.shape()[1]; }

    void check() const {
        if (rgb.rank() != 3 || rgb.shape()[2] != 3) throw std::invalid_argument("frame: rgb must be [H,W,3]");
        const int h = height(), w = width();
        if (object_mask.shape() != Shape{h, w} || validity_mask.shape() != Shape{h, w})
            throw std::invalid_argument("frame: mask shapes must match rgb");
        if (!camera.valid()) throw std::invalid_argument("frame: invalid camera");
        if (camera.width != w || camera.height != h)
            throw std::invalid_argument("frame: camera size does not match images");
        for (int64_t i = 0; i < object_mask.size(); ++i) {
            const double m = object_mask[i], v = validity_mask[i];
            if ((m != 0.0 && m != 1.0) || (v != 0.0 && v != 1.0))
                throw std::invalid_argument("frame: masks must be binary");
            if (v == 0.0 && m != 0.0)
                throw std::invalid_argument("frame: object mask set on an invalid pixel");
        }
    }
};

}  // namespace finv
