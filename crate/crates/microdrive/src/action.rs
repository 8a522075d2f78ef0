use crate::{Result, SimError};

pub const STEER: [f64; 3] = [-0.3, 0.0, 0.3];
pub const THROTTLE: [f64; 3] = [0.0, 0.2, 0.3];
pub const NUM_ACTIONS: usize = STEER.len() * THROTTLE.len();

/// Discrete control; `index = steer_index * 3 + throttle_index`. Brake is always zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action(usize);

impl Action {
    pub fn new(index: usize) -> Result<Self> {
        if index >= NUM_ACTIONS {
            return Err(SimError::Contract(format!("action index {index} out of range")));
        }
        Ok(Action(index))
    }

    pub fn from_parts(steer_index: usize, throttle_index: usize) -> Result<Self> {
        if steer_index >= STEER.len() || throttle_index >= THROTTLE.len() {
            return Err(SimError::Contract("action component out of range".into()));
        }
        Ok(Action(steer_index * THROTTLE.len() + throttle_index))
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn steer(self) -> f64 {
        STEER[self.0 / THROTTLE.len()]
    }

    pub fn throttle(self) -> f64 {
        THROTTLE[self.0 % THROTTLE.len()]
    }

    pub fn brake(self) -> f64 {
        0.0
    }

    pub const IDLE: Action = Action(3);
    pub const CRUISE: Action = Action(4);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoding_is_bijective() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..NUM_ACTIONS {
            let a = Action::new(i).unwrap();
            assert!(seen.insert((a.steer().to_bits(), a.throttle().to_bits())));
            let s = STEER.iter().position(|&x| x == a.steer()).unwrap();
            let t = THROTTLE.iter().position(|&x| x == a.throttle()).unwrap();
            assert_eq!(Action::from_parts(s, t).unwrap(), a);
            assert_eq!(a.brake(), 0.0);
        }
        assert!(Action::new(9).is_err());
        assert_eq!((Action::IDLE.steer(), Action::IDLE.throttle()), (0.0, 0.0));
        assert_eq!((Action::CRUISE.steer(), Action::CRUISE.throttle()), (0.0, 0.2));
    }
}
