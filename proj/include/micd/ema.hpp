#pragma once

#include "micd/network.hpp"

namespace micd {

// EMA shadow of a student network; never touched by the optimizer.
struct TeacherState {
    ParamVector params;
    double alpha = 0.99;
};

// Value copy of the student.
TeacherState init_teacher(const ParamVector& student, double alpha = 0.99);

// theta' <- alpha * theta' + (1 - alpha) * theta, element-wise.
void ema_update(TeacherState& teacher, const ParamVector& student);

} // namespace micd
