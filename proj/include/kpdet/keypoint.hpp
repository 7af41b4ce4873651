#pragma once

namespace kpdet {

/// Ground-truth keypoint; coordinates normalized to [0,1].
struct Keypoint {
    int class_id = 0;
    double x = 0.0;
    double y = 0.0;
};

} // namespace kpdet
