#include "magslam/magslam.hpp"
int main(){return 0;}
