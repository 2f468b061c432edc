//! Independent evaluation of the trading objective from a realized path.

/// `X_T + q_T (S_T - b2 q_T) - b3 sum_{t=1..T} q_t^2 dt` for one agent,
/// where `X_T = -sum_t nu_t (S_t + b1 nu_t)`. `prices` and `inventories`
/// run over `t = 0..=T`; `trades` over `t = 0..T`.
pub fn objective(
    prices: &[f64],
    inventories: &[f64],
    trades: &[f64],
    b1: f64,
    b2: Option<f64>,
    b3: f64,
    dt: f64,
) -> f64 {
    let t_max = trades.len();
    let cash: f64 = (0..t_max).map(|t| -trades[t] * (prices[t] + b1 * trades[t])).sum();
    let risk: f64 = (1..=t_max).map(|t| inventories[t] * inventories[t]).sum::<f64>() * b3 * dt;
    let q_t = inventories[t_max];
    let terminal = b2.map_or(0.0, |b2| q_t * (prices[t_max] - b2 * q_t));
    cash + terminal - risk
}
