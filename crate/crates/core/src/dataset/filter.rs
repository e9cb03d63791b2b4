use std::collections::HashMap;

use super::ingest::InteractionLog;

pub const CORE_THRESHOLD: usize = 5;

/// Repeatedly drops users and items with fewer than `k` interactions until
/// nothing changes. Input order of the surviving rows is preserved.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let rows = log.interactions();
    let mut user_ix: HashMap<&str, usize> = HashMap::new();
    let mut item_ix: HashMap<&str, usize> = HashMap::new();
    let mut row_user = Vec::with_capacity(rows.len());
    let mut row_item = Vec::with_capacity(rows.len());
    for r in rows {
        let n = user_ix.len();
        row_user.push(*user_ix.entry(r.user_id.as_str()).or_insert(n));
        let n = item_ix.len();
        row_item.push(*item_ix.entry(r.item_id.as_str()).or_insert(n));
    }
    let mut user_rows: Vec<Vec<usize>> = vec![Vec::new(); user_ix.len()];
    let mut item_rows: Vec<Vec<usize>> = vec![Vec::new(); item_ix.len()];
    for (r, (&u, &i)) in row_user.iter().zip(&row_item).enumerate() {
        user_rows[u].push(r);
        item_rows[i].push(r);
    }
    let mut user_deg: Vec<usize> = user_rows.iter().map(Vec::len).collect();
    let mut item_deg: Vec<usize> = item_rows.iter().map(Vec::len).collect();
    let mut alive = vec![true; rows.len()];
    let mut user_dead = vec![false; user_deg.len()];
    let mut item_dead = vec![false; item_deg.len()];

    // Worklist of (is_user, index) nodes whose degree fell below k.
    let mut stack: Vec<(bool, usize)> = Vec::new();
    stack.extend((0..user_deg.len()).filter(|&u| user_deg[u] < k).map(|u| (true, u)));
    stack.extend((0..item_deg.len()).filter(|&i| item_deg[i] < k).map(|i| (false, i)));
    while let Some((is_user, ix)) = stack.pop() {
        let (dead, list) = if is_user {
            (&mut user_dead[ix], &user_rows[ix])
        } else {
            (&mut item_dead[ix], &item_rows[ix])
        };
        if *dead {
            continue;
        }
        *dead = true;
        for &r in list {
            if !alive[r] {
                continue;
            }
            alive[r] = false;
            if is_user {
                let i = row_item[r];
                item_deg[i] -= 1;
                if item_deg[i] < k && !item_dead[i] {
                    stack.push((false, i));
                }
            } else {
                let u = row_user[r];
                user_deg[u] -= 1;
                if user_deg[u] < k && !user_dead[u] {
                    stack.push((true, u));
                }
            }
        }
    }
    let kept = rows.iter().zip(&alive).filter(|(_, &a)| a).map(|(r, _)| r.clone()).collect();
    InteractionLog::new(kept)
}

pub fn five_core_filter(log: &InteractionLog) -> InteractionLog {
    k_core_filter(log, CORE_THRESHOLD)
}

/// Smallest per-user and per-item interaction counts, or `None` for an empty log.
pub fn min_degrees(log: &InteractionLog) -> Option<(usize, usize)> {
    if log.is_empty() {
        return None;
    }
    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    for r in log.interactions() {
        *users.entry(&r.user_id).or_default() += 1;
        *items.entry(&r.item_id).or_default() += 1;
    }
    Some((*users.values().min()?, *items.values().min()?))
}
