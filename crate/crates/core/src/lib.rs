//! Whittle-index pilot allocation over Markovian fading channels.
//!
//! Module map: [`channel`] (Markov channels and beliefs), [`reward`],
//! [`index`] (closed form and envelope oracle), [`oracle`] (value iteration
//! baselines), [`bounds`] (approximation error), [`fluid`] (two-class fluid
//! limit), [`sim`] (multi-user Monte Carlo) and [`io`].

pub mod arm;
pub mod bounds;
pub mod channel;
pub mod fluid;
pub mod index;
pub mod io;
pub mod oracle;
pub mod reward;
pub mod sim;
