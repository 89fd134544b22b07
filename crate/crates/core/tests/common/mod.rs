pub mod grad_suite;
pub mod gradcheck;
pub mod oracles;
