//! Madgwick gradient-descent orientation filter (IMU and MARG variants).

/// Unit quaternion `w + xi + yj + zk`, rotating sensor frame into earth frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn normalized(self) -> Self {
        let n = self.norm();
        Quaternion {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Earth-frame vertical expressed in the sensor frame.
    pub fn gravity_direction(&self) -> [f64; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            2.0 * (x * z - w * y),
            2.0 * (w * x + y * z),
            w * w - x * x - y * y + z * z,
        ]
    }

    /// Heading about the earth vertical (ZYX yaw).
    pub fn yaw(&self) -> f64 {
        let Quaternion { w, x, y, z } = *self;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }
}

/// Stateful filter at a fixed sample period.
#[derive(Debug, Clone)]
pub struct Madgwick {
    pub beta: f64,
    pub sample_period: f64,
    pub q: Quaternion,
}

impl Madgwick {
    pub fn new(beta: f64, sample_rate_hz: f64) -> Self {
        Madgwick {
            beta,
            sample_period: 1.0 / sample_rate_hz,
            q: Quaternion::IDENTITY,
        }
    }

    /// Gyroscope + accelerometer step.
    pub fn update_imu(&mut self, gyro: [f64; 3], accel: [f64; 3]) -> Quaternion {
        let Quaternion {
            w: q0,
            x: q1,
            y: q2,
            z: q3,
        } = self.q;
        let [gx, gy, gz] = gyro;

        let mut dq = [
            0.5 * (-q1 * gx - q2 * gy - q3 * gz),
            0.5 * (q0 * gx + q2 * gz - q3 * gy),
            0.5 * (q0 * gy - q1 * gz + q3 * gx),
            0.5 * (q0 * gz + q1 * gy - q2 * gx),
        ];

        let an = (accel[0] * accel[0] + accel[1] * accel[1] + accel[2] * accel[2]).sqrt();
        if an > 0.0 {
            let (ax, ay, az) = (accel[0] / an, accel[1] / an, accel[2] / an);
            // objective f_g and its Jacobian, contracted: J^T f
            let f1 = 2.0 * (q1 * q3 - q0 * q2) - ax;
            let f2 = 2.0 * (q0 * q1 + q2 * q3) - ay;
            let f3 = 2.0 * (0.5 - q1 * q1 - q2 * q2) - az;
            let s = [
                -2.0 * q2 * f1 + 2.0 * q1 * f2,
                2.0 * q3 * f1 + 2.0 * q0 * f2 - 4.0 * q1 * f3,
                -2.0 * q0 * f1 + 2.0 * q3 * f2 - 4.0 * q2 * f3,
                2.0 * q1 * f1 + 2.0 * q2 * f2,
            ];
            self.apply_correction(&mut dq, s);
        }
        self.integrate(dq)
    }

    /// Gyroscope + accelerometer + magnetometer step. Falls back to the IMU
    /// step when the magnetometer reading is zero.
    pub fn update_marg(&mut self, gyro: [f64; 3], accel: [f64; 3], mag: [f64; 3]) -> Quaternion {
        let mn = (mag[0] * mag[0] + mag[1] * mag[1] + mag[2] * mag[2]).sqrt();
        let an = (accel[0] * accel[0] + accel[1] * accel[1] + accel[2] * accel[2]).sqrt();
        if mn == 0.0 || an == 0.0 {
            return self.update_imu(gyro, accel);
        }
        let Quaternion {
            w: q0,
            x: q1,
            y: q2,
            z: q3,
        } = self.q;
        let [gx, gy, gz] = gyro;
        let mut dq = [
            0.5 * (-q1 * gx - q2 * gy - q3 * gz),
            0.5 * (q0 * gx + q2 * gz - q3 * gy),
            0.5 * (q0 * gy - q1 * gz + q3 * gx),
            0.5 * (q0 * gz + q1 * gy - q2 * gx),
        ];
        let (ax, ay, az) = (accel[0] / an, accel[1] / an, accel[2] / an);
        let (mx, my, mz) = (mag[0] / mn, mag[1] / mn, mag[2] / mn);

        // reference direction of the earth's field, rotated into earth frame
        let hx = mx * (q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3)
            + 2.0 * my * (q1 * q2 - q0 * q3)
            + 2.0 * mz * (q0 * q2 + q1 * q3);
        let hy = 2.0 * mx * (q0 * q3 + q1 * q2)
            + my * (q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3)
            + 2.0 * mz * (q2 * q3 - q0 * q1);
        let bx = (hx * hx + hy * hy).sqrt();
        let bz = 2.0 * mx * (q1 * q3 - q0 * q2)
            + 2.0 * my * (q0 * q1 + q2 * q3)
            + mz * (q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3);

        let fg = [
            2.0 * (q1 * q3 - q0 * q2) - ax,
            2.0 * (q0 * q1 + q2 * q3) - ay,
            2.0 * (0.5 - q1 * q1 - q2 * q2) - az,
        ];
        let fb = [
            2.0 * bx * (0.5 - q2 * q2 - q3 * q3) + 2.0 * bz * (q1 * q3 - q0 * q2) - mx,
            2.0 * bx * (q1 * q2 - q0 * q3) + 2.0 * bz * (q0 * q1 + q2 * q3) - my,
            2.0 * bx * (q0 * q2 + q1 * q3) + 2.0 * bz * (0.5 - q1 * q1 - q2 * q2) - mz,
        ];
        let jg = [
            [-2.0 * q2, 2.0 * q3, -2.0 * q0, 2.0 * q1],
            [2.0 * q1, 2.0 * q0, 2.0 * q3, 2.0 * q2],
            [0.0, -4.0 * q1, -4.0 * q2, 0.0],
        ];
        let jb = [
            [
                -2.0 * bz * q2,
                2.0 * bz * q3,
                -4.0 * bx * q2 - 2.0 * bz * q0,
                -4.0 * bx * q3 + 2.0 * bz * q1,
            ],
            [
                -2.0 * bx * q3 + 2.0 * bz * q1,
                2.0 * bx * q2 + 2.0 * bz * q0,
                2.0 * bx * q1 + 2.0 * bz * q3,
                -2.0 * bx * q0 + 2.0 * bz * q2,
            ],
            [
                2.0 * bx * q2,
                2.0 * bx * q3 - 4.0 * bz * q1,
                2.0 * bx * q0 - 4.0 * bz * q2,
                2.0 * bx * q1,
            ],
        ];
        let mut s = [0.0; 4];
        for (c, sc) in s.iter_mut().enumerate() {
            for r in 0..3 {
                *sc += jg[r][c] * fg[r] + jb[r][c] * fb[r];
            }
        }
        self.apply_correction(&mut dq, s);
        self.integrate(dq)
    }

    fn apply_correction(&self, dq: &mut [f64; 4], s: [f64; 4]) {
        let sn = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + s[3] * s[3]).sqrt();
        if sn > 0.0 {
            for (d, si) in dq.iter_mut().zip(s) {
                *d -= self.beta * si / sn;
            }
        }
    }

    fn integrate(&mut self, dq: [f64; 4]) -> Quaternion {
        let dt = self.sample_period;
        self.q = Quaternion {
            w: self.q.w + dq[0] * dt,
            x: self.q.x + dq[1] * dt,
            y: self.q.y + dq[2] * dt,
            z: self.q.z + dq[3] * dt,
        }
        .normalized();
        self.q
    }
}
