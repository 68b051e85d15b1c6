//! Coverage-guided greybox fuzzing with a learned energy schedule.
//!
//! Besides the classic queue/havoc loop, the [`scheduler`] can hand a
//! 128-byte window of each test case to a recurrent [`policy`] network that
//! picks how many havoc iterations the window gets, and learns online from
//! how many of them turned out interesting.

pub mod campaign;
pub mod corpus;
pub mod coverage;
pub mod executor;
pub mod mutators;
pub mod policy;
pub mod scheduler;
