// Shapes of the server's JSON payloads, as documented in the backend README.

export type SlotStateName = "vacant" | "reserved" | "occupied";
export type SlotColor = "green" | "orange" | "red";

export interface SlotView {
  slot_no: number;
  state: SlotStateName;
  color: SlotColor;
  reserved_by_me: boolean;
}

export interface Counts {
  vacant: number;
  reserved: number;
  occupied: number;
}

export interface SpaceSummary {
  space_id: string;
  name: string;
  location: { latitude: number; longitude: number };
  capacity: number;
  counts: Counts;
  tariff: {
    free: boolean;
    rate_per_unit: number;
    billing_unit_minutes: number;
    free_minutes: number;
    currency: string;
  };
  reservation_ttl_minutes: number;
  edge_status: "online" | "offline";
  admin_name: string;
  admin_contact: string;
}

export interface SpaceDetail extends SpaceSummary {
  as_of_seq: number;
  slots: SlotView[];
}

export interface Motorist {
  motorist_id: string;
  full_name: string;
  rfid_uid: string;
  token?: string;
}

export interface Reservation {
  reservation_id: string;
  space_id: string;
  slot_no: number;
  motorist_id: string;
  reserved_at: string;
  expires_at: string;
  status: "active" | "cancelled" | "expired" | "converted";
}

export type EventCause =
  | "reserved"
  | "cancelled"
  | "expired"
  | "checked_in"
  | "checked_out";

export interface StreamEvent {
  seq: number;
  timestamp: string;
  space_id: string;
  slot_no: number;
  slot: SlotView;
  cause: EventCause;
}

export const COLOR_BY_STATE: Record<SlotStateName, SlotColor> = {
  vacant: "green",
  reserved: "orange",
  occupied: "red",
};
