//! Render the challenge leaderboard, optionally from a CSV of
//! `name,public,private` rows.
//!
//! cargo run --example leaderboard -- [LEADERBOARD_CSV]

use ear_tsm::scorer;

fn main() -> ear_tsm::Result<()> {
    let rows = match std::env::args().nth(1) {
        Some(path) => scorer::read_leaderboard(path.as_ref())?,
        None => scorer::parse_leaderboard(scorer::CHALLENGE_LEADERBOARD)?,
    };
    print!("{}", scorer::render_leaderboard(&rows)?);
    Ok(())
}
