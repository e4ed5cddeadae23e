#pragma once

#include <Eigen/Core>

namespace wisdom {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatX = Mat<double>;
using VecX = Vec<double>;
using MatXi = Eigen::MatrixXi;
using VecXi = Eigen::VectorXi;

}  // namespace wisdom
