pub mod oracles;
pub mod scenes;
