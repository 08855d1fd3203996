#include "l2l/tape.hpp"

namespace l2l {

template class Tape<float>;
template class Tape<double>;

}  // namespace l2l
