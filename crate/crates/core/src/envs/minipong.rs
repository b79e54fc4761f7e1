//! MiniPong: a small two-paddle Pong rendered as binary frames.
//!
//! The agent controls the right paddle, a scripted opponent the left one. A point ends
//! when the ball leaves the field; the ball is then re-served from the centre. Frames
//! are `size × size` with background 0 and paddles/ball 1.

use serde::{Deserialize, Serialize};

use super::frames::FrameStack;
use crate::numerics::{RealMat, SeededRng};

pub const ACTION_UP: usize = 0;
pub const ACTION_STAY: usize = 1;
pub const ACTION_DOWN: usize = 2;
pub const NUM_ACTIONS: usize = 3;

/// Pseudo-logit magnitude emitted by the scripted expert.
pub const EXPERT_LOGIT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentPolicy {
    /// Follows the ball centre at `opponent_speed` px per step.
    Tracking,
    /// Mirror of the scripted expert, moving at `paddle_speed`.
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinipongConfig {
    pub size: usize,
    pub paddle_height: i32,
    pub paddle_width: i32,
    pub ball_size: i32,
    pub paddle_speed: i32,
    pub ball_speed: i32,
    pub opponent_speed: i32,
    /// Left column of the agent (right-hand) paddle.
    pub agent_x: i32,
    /// Left column of the opponent paddle.
    pub opponent_x: i32,
    pub opponent: OpponentPolicy,
    pub win_score: u32,
    pub max_steps: usize,
    pub frames: usize,
    pub patch: usize,
}

impl Default for MinipongConfig {
    fn default() -> Self {
        Self {
            size: 84,
            paddle_height: 12,
            paddle_width: 2,
            ball_size: 2,
            paddle_speed: 2,
            ball_speed: 2,
            opponent_speed: 1,
            agent_x: 78,
            opponent_x: 4,
            opponent: OpponentPolicy::Tracking,
            win_score: 5,
            max_steps: 3000,
            frames: 4,
            patch: 6,
        }
    }
}

impl MinipongConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.size / self.patch;
        g * g
    }

    fn max_paddle_y(&self) -> i32 {
        self.size as i32 - self.paddle_height
    }

    fn max_ball_y(&self) -> i32 {
        self.size as i32 - self.ball_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinipongState {
    pub ball_x: i32,
    pub ball_y: i32,
    pub ball_vx: i32,
    pub ball_vy: i32,
    pub agent_y: i32,
    pub opponent_y: i32,
    pub agent_score: u32,
    pub opponent_score: u32,
    pub step_count: usize,
}

impl MinipongState {
    /// Everything the renderer needs: `[ball_x, ball_y, agent_y, opponent_y]`.
    pub fn render_key(&self) -> [i32; 4] {
        [self.ball_x, self.ball_y, self.agent_y, self.opponent_y]
    }

    /// Agent points minus opponent points.
    pub fn score(&self) -> i64 {
        self.agent_score as i64 - self.opponent_score as i64
    }
}

fn paint(frame: &mut RealMat, x0: i32, y0: i32, w: i32, h: i32) {
    let size = frame.rows() as i32;
    for y in y0.max(0)..(y0 + h).min(size) {
        for x in x0.max(0)..(x0 + w).min(size) {
            frame.set(y as usize, x as usize, 1.0);
        }
    }
}

/// Frame for a render key `[ball_x, ball_y, agent_y, opponent_y]`.
pub fn render_key(cfg: &MinipongConfig, key: [i32; 4]) -> RealMat {
    let mut frame = RealMat::zeros(cfg.size, cfg.size);
    let [bx, by, ay, oy] = key;
    paint(&mut frame, cfg.agent_x, ay, cfg.paddle_width, cfg.paddle_height);
    paint(&mut frame, cfg.opponent_x, oy, cfg.paddle_width, cfg.paddle_height);
    paint(&mut frame, bx, by, cfg.ball_size, cfg.ball_size);
    frame
}

pub fn minipong_render(cfg: &MinipongConfig, state: &MinipongState) -> RealMat {
    render_key(cfg, state.render_key())
}

/// Dead-zone tracker from the point of view of a paddle at `paddle_y`.
fn track(cfg: &MinipongConfig, paddle_y: i32, ball_y: i32) -> usize {
    let paddle_c = 2 * paddle_y + cfg.paddle_height;
    let ball_c = 2 * ball_y + cfg.ball_size;
    // doubled coordinates keep half-pixel centres integral
    if ball_c < paddle_c - 4 {
        ACTION_UP
    } else if ball_c > paddle_c + 4 {
        ACTION_DOWN
    } else {
        ACTION_STAY
    }
}

/// Privileged teacher: moves the paddle centre toward the ball centre with a 2 px dead
/// zone. Pseudo-logits are `+2` for the chosen action and `−2` for the others.
pub fn scripted_expert(cfg: &MinipongConfig, state: &MinipongState) -> (usize, [f64; NUM_ACTIONS]) {
    let a = track(cfg, state.agent_y, state.ball_y);
    let mut logits = [-EXPERT_LOGIT; NUM_ACTIONS];
    logits[a] = EXPERT_LOGIT;
    (a, logits)
}

fn move_paddle(cfg: &MinipongConfig, y: i32, action: usize, speed: i32) -> i32 {
    let dy = match action {
        ACTION_UP => -speed,
        ACTION_DOWN => speed,
        _ => 0,
    };
    (y + dy).clamp(0, cfg.max_paddle_y())
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MinipongError {
    #[error("invalid MiniPong action {0}")]
    InvalidAction(usize),
}

#[derive(Clone, Debug)]
pub struct Minipong {
    pub config: MinipongConfig,
    pub state: MinipongState,
    rng: SeededRng,
    stack: FrameStack,
    done: bool,
}

impl Minipong {
    pub fn new(config: MinipongConfig) -> Self {
        let mut env = Self {
            config,
            state: MinipongState {
                ball_x: 0,
                ball_y: 0,
                ball_vx: 0,
                ball_vy: 0,
                agent_y: 0,
                opponent_y: 0,
                agent_score: 0,
                opponent_score: 0,
                step_count: 0,
            },
            rng: SeededRng::new(0),
            stack: FrameStack::new(config.frames, config.size, config.size),
            done: false,
        };
        env.reset(0);
        env
    }

    pub fn reset(&mut self, seed: u64) {
        let cfg = self.config;
        self.rng = SeededRng::new(seed);
        let mid = (cfg.size as i32 - cfg.paddle_height) / 2;
        self.state = MinipongState {
            ball_x: 0,
            ball_y: 0,
            ball_vx: 0,
            ball_vy: 0,
            agent_y: mid,
            opponent_y: mid,
            agent_score: 0,
            opponent_score: 0,
            step_count: 0,
        };
        self.serve();
        self.done = false;
        self.stack = FrameStack::new(cfg.frames, cfg.size, cfg.size);
        self.stack.push(minipong_render(&cfg, &self.state));
    }

    fn serve(&mut self) {
        let cfg = &self.config;
        let size = cfg.size as i32;
        let s = &mut self.state;
        s.ball_x = (size - cfg.ball_size) / 2;
        let lo = size / 4;
        let hi = 3 * size / 4 - cfg.ball_size;
        s.ball_y = lo + self.rng.below((hi - lo + 1) as usize) as i32;
        let vs = cfg.ball_speed;
        s.ball_vx = if self.rng.coin() { vs } else { -vs };
        s.ball_vy = if self.rng.coin() { vs } else { -vs };
    }

    pub fn frames(&self) -> &FrameStack {
        &self.stack
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// One step; returns `(reward, done)` with reward `+1`/`−1` per point won/lost.
    pub fn step(&mut self, action: usize) -> Result<(f64, bool), MinipongError> {
        if action >= NUM_ACTIONS {
            return Err(MinipongError::InvalidAction(action));
        }
        let cfg = self.config;
        let s = &mut self.state;
        s.agent_y = move_paddle(&cfg, s.agent_y, action, cfg.paddle_speed);
        s.opponent_y = match cfg.opponent {
            OpponentPolicy::Tracking => {
                let diff = (2 * s.ball_y + cfg.ball_size) - (2 * s.opponent_y + cfg.paddle_height);
                let dy = (diff / 2).clamp(-cfg.opponent_speed, cfg.opponent_speed);
                (s.opponent_y + dy).clamp(0, cfg.max_paddle_y())
            }
            OpponentPolicy::Expert => {
                let a = track(&cfg, s.opponent_y, s.ball_y);
                move_paddle(&cfg, s.opponent_y, a, cfg.paddle_speed)
            }
        };

        let (bx, bw) = (s.ball_x, cfg.ball_size);
        let mut nx = bx + s.ball_vx;
        let mut ny = s.ball_y + s.ball_vy;
        if ny < 0 {
            ny = -ny;
            s.ball_vy = -s.ball_vy;
        } else if ny > cfg.max_ball_y() {
            ny = 2 * cfg.max_ball_y() - ny;
            s.ball_vy = -s.ball_vy;
        }

        let overlaps = |py: i32| ny < py + cfg.paddle_height && ny + bw > py;
        let bounce_vy = |py: i32| {
            if 2 * ny + bw < 2 * py + cfg.paddle_height {
                -cfg.ball_speed
            } else {
                cfg.ball_speed
            }
        };
        if s.ball_vx > 0 && bx + bw <= cfg.agent_x && nx + bw > cfg.agent_x && overlaps(s.agent_y) {
            nx = cfg.agent_x - bw;
            s.ball_vx = -s.ball_vx;
            s.ball_vy = bounce_vy(s.agent_y);
        } else if s.ball_vx < 0
            && bx >= cfg.opponent_x + cfg.paddle_width
            && nx < cfg.opponent_x + cfg.paddle_width
            && overlaps(s.opponent_y)
        {
            nx = cfg.opponent_x + cfg.paddle_width;
            s.ball_vx = -s.ball_vx;
            s.ball_vy = bounce_vy(s.opponent_y);
        }
        s.ball_x = nx;
        s.ball_y = ny;

        let mut reward = 0.0;
        if nx + bw > cfg.size as i32 {
            s.opponent_score += 1;
            reward = -1.0;
        } else if nx < 0 {
            s.agent_score += 1;
            reward = 1.0;
        }
        if reward != 0.0 {
            self.serve();
        }
        let s = &mut self.state;
        s.step_count += 1;
        self.done = s.agent_score >= cfg.win_score
            || s.opponent_score >= cfg.win_score
            || s.step_count >= cfg.max_steps;
        self.stack.push(minipong_render(&cfg, s));
        Ok((reward, self.done))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(ball: (i32, i32, i32, i32), agent_y: i32) -> MinipongState {
        MinipongState {
            ball_x: ball.0,
            ball_y: ball.1,
            ball_vx: ball.2,
            ball_vy: ball.3,
            agent_y,
            opponent_y: 36,
            agent_score: 0,
            opponent_score: 0,
            step_count: 0,
        }
    }

    #[test]
    fn wall_reflection_flips_vertical_velocity() {
        let mut env = Minipong::new(MinipongConfig::default());
        env.state = state((40, 1, 2, -2), 36);
        env.step(ACTION_STAY).unwrap();
        assert_eq!(env.state.ball_vy, 2);
        assert_eq!(env.state.ball_y, 1);
        env.state = state((40, 81, 2, 2), 36);
        env.step(ACTION_STAY).unwrap();
        assert_eq!(env.state.ball_vy, -2);
    }

    #[test]
    fn agent_paddle_returns_ball() {
        let mut env = Minipong::new(MinipongConfig::default());
        env.state = state((75, 40, 2, 2), 36);
        let (r, _) = env.step(ACTION_STAY).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(env.state.ball_vx, -2);
        assert_eq!(env.state.ball_x, 76);
        // ball centre below paddle centre
        assert_eq!(env.state.ball_vy, 2);
    }

    #[test]
    fn missed_ball_scores_for_opponent() {
        let mut env = Minipong::new(MinipongConfig::default());
        env.state = state((75, 10, 2, 0), 60);
        let mut total = 0.0;
        for _ in 0..5 {
            total += env.step(ACTION_STAY).unwrap().0;
        }
        assert_eq!(total, -1.0);
        assert_eq!(env.state.opponent_score, 1);
    }

    #[test]
    fn expert_policy_directions() {
        let cfg = MinipongConfig::default();
        // paddle centre 42, ball centre 31
        let s = state((40, 30, 2, 2), 36);
        assert_eq!(scripted_expert(&cfg, &s).0, ACTION_UP);
        let s = state((40, 41, 2, 2), 36);
        assert_eq!(scripted_expert(&cfg, &s).0, ACTION_STAY);
        let s = state((40, 44, 2, 2), 36);
        assert_eq!(scripted_expert(&cfg, &s).0, ACTION_DOWN);
        let (_, logits) = scripted_expert(&cfg, &s);
        assert_eq!(logits, [-2.0, -2.0, 2.0]);
    }

    #[test]
    fn frozen_world_renders_constant_frames() {
        let cfg = MinipongConfig {
            paddle_speed: 0,
            ball_speed: 0,
            opponent_speed: 0,
            ..MinipongConfig::default()
        };
        let mut env = Minipong::new(cfg);
        env.reset(3);
        let first = minipong_render(&cfg, &env.state);
        for _ in 0..20 {
            env.step(ACTION_DOWN).unwrap();
            assert_eq!(minipong_render(&cfg, &env.state), first);
        }
    }

    #[test]
    fn frames_are_binary() {
        let mut env = Minipong::new(MinipongConfig::default());
        env.reset(4);
        for t in 0..200 {
            env.step(t % 3).unwrap();
            let f = minipong_render(&env.config, &env.state);
            assert!(f.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn invalid_action_rejected() {
        let mut env = Minipong::new(MinipongConfig::default());
        assert_eq!(env.step(3), Err(MinipongError::InvalidAction(3)));
    }
}
